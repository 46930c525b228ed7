//! Layers composed from tape operations.
//!
//! Each layer owns [`ParamId`]s into the model's [`ParamStore`] and records
//! its forward pass on a [`Tape`]. Weight initialisation is He-uniform
//! (`sqrt(6/fan_in)`) for layers feeding ReLU and Glorot-uniform
//! (`sqrt(6/(fan_in+fan_out))`) for sigmoid/tanh/attention/recurrent layers;
//! biases start at zero, batch-norm at gamma=1/beta=0.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Mode, NodeId, PoolKind, Tape};
use crate::tensor::Tensor;

/// Mutable state threaded through a forward pass: execution mode plus the
/// RNG that drives dropout masks in train mode.
pub struct ForwardCtx<'a> {
    pub mode: Mode,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval() -> ForwardCtx<'static> {
        ForwardCtx {
            mode: Mode::Eval,
            rng: None,
        }
    }

    pub fn train(rng: &'a mut ChaCha8Rng) -> ForwardCtx<'a> {
        ForwardCtx {
            mode: Mode::Train,
            rng: Some(rng),
        }
    }
}

/// Weight initialisation family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    HeUniform,
    GlorotUniform,
}

pub(crate) fn init_weights(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    init: Init,
) -> Tensor {
    let bound = match init {
        Init::HeUniform => (6.0 / fan_in as f64).sqrt(),
        Init::GlorotUniform => (6.0 / (fan_in + fan_out) as f64).sqrt(),
    };
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| rng.random::<f64>() * 2.0 * bound - bound)
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("init shape")
}

/// Elementwise non-linearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

pub fn activate(tape: &mut Tape, x: NodeId, kind: Activation) -> NodeId {
    match kind {
        Activation::Relu => tape.relu(x),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Tanh => tape.tanh(x),
    }
}

/// Fully connected layer: `y = x W + b`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    in_dim: usize,
    out_dim: usize,
}

impl Dense {
    pub fn new(
        params: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
    ) -> Self {
        let w = params.add(
            format!("{name}.w"),
            init_weights(rng, &[in_dim, out_dim], in_dim, out_dim, init),
            true,
        );
        let b = params.add(format!("{name}.b"), Tensor::zeros(&[out_dim]), true);
        Dense { w, b, in_dim, out_dim }
    }

    /// `[B, in] -> [B, out]`.
    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, x: NodeId) -> Result<NodeId> {
        let sh = tape.value(x).shape().to_vec();
        if sh.len() != 2 || sh[1] != self.in_dim {
            return Err(Error::shape("dense", &[sh[0], self.in_dim], &sh));
        }
        let w = tape.param(params, self.w);
        let b = tape.param(params, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    /// Apply the same affine map at every timestep: `[B,T,in] -> [B,T,out]`.
    pub fn forward_per_timestep(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        x: NodeId,
    ) -> Result<NodeId> {
        let sh = tape.value(x).shape().to_vec();
        if sh.len() != 3 || sh[2] != self.in_dim {
            return Err(Error::shape("dense per-timestep", &[0, 0, self.in_dim], &sh));
        }
        let (b, t) = (sh[0], sh[1]);
        let flat = tape.reshape(x, &[b * t, self.in_dim])?;
        let y = self.forward(tape, params, flat)?;
        tape.reshape(y, &[b, t, self.out_dim])
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }
}

/// Temporal padding policy for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k-1)/2` on both ends; requires odd `k`, stride 1.
    Same,
    /// No padding; output length `floor((T-k)/stride)+1`.
    Valid,
}

/// 1-D convolution along the time axis (cross-correlation, no kernel flip).
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub bias: ParamId,
    k: usize,
    stride: usize,
    padding: Padding,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        k: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        padding: Padding,
        init: Init,
    ) -> Result<Self> {
        if padding == Padding::Same && (k % 2 == 0 || stride != 1) {
            return Err(Error::Config(format!(
                "same-padded conv1d requires odd kernel and stride 1, got k={k}, stride={stride}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv1d stride must be >= 1".into()));
        }
        let kernel = params.add(
            format!("{name}.kernel"),
            init_weights(rng, &[k, c_in, c_out], k * c_in, k * c_out, init),
            true,
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), true);
        Ok(Conv1d { kernel, bias, k, stride, padding })
    }

    pub fn pad(&self) -> usize {
        match self.padding {
            Padding::Same => (self.k - 1) / 2,
            Padding::Valid => 0,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, x: NodeId) -> Result<NodeId> {
        let kernel = tape.param(params, self.kernel);
        let bias = tape.param(params, self.bias);
        tape.conv1d(x, kernel, bias, self.stride, self.pad())
    }

    /// Output length for an input of length `t`.
    pub fn out_len(&self, t: usize) -> Result<usize> {
        let padded = t + 2 * self.pad();
        if self.k > padded {
            return Err(Error::Config(format!(
                "conv1d kernel {} exceeds padded length {padded}",
                self.k
            )));
        }
        Ok((padded - self.k) / self.stride + 1)
    }
}

/// Per-channel batch normalisation with tracked running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNorm1d {
    pub fn new(params: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm1d {
            gamma: params.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: params.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: params.add(format!("{name}.running_var"), Tensor::ones(&[channels]), false),
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &mut ParamStore,
        x: NodeId,
        mode: Mode,
    ) -> Result<NodeId> {
        let gamma = tape.param(params, self.gamma);
        let beta = tape.param(params, self.beta);
        tape.batch_norm(
            x,
            gamma,
            beta,
            params,
            self.running_mean,
            self.running_var,
            mode,
            self.epsilon,
            self.momentum,
        )
    }
}

/// Inverted dropout; identity in eval mode.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0,1)")));
        }
        Ok(Dropout { p })
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId, ctx: &mut ForwardCtx) -> Result<NodeId> {
        if ctx.mode == Mode::Eval || self.p == 0.0 {
            return Ok(x);
        }
        let rng = ctx
            .rng
            .as_deref_mut()
            .ok_or_else(|| Error::Config("dropout in train mode needs an rng".into()))?;
        tape.dropout(x, self.p, rng)
    }
}

/// Direction of a recurrent layer over the time axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
    Bidirectional,
}

/// One gated recurrent unit.
///
/// The cell follows the standard formulation:
/// ```text
/// r_t = sigmoid(x_t W_xr + h_{t-1} W_hr + b_r)
/// z_t = sigmoid(x_t W_xz + h_{t-1} W_hz + b_z)
/// n_t = tanh(x_t W_xn + b_xn + r_t * (h_{t-1} W_hn + b_hn))
/// h_t = (1 - z_t) * n_t + z_t * h_{t-1}
/// ```
/// with a zero initial hidden state.
#[derive(Debug, Clone)]
pub struct GruCell {
    w_xr: ParamId,
    w_hr: ParamId,
    b_r: ParamId,
    w_xz: ParamId,
    w_hz: ParamId,
    b_z: ParamId,
    w_xn: ParamId,
    b_xn: ParamId,
    w_hn: ParamId,
    b_hn: ParamId,
    hidden: usize,
}

impl GruCell {
    pub fn new(
        params: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Self {
        let mat = |params: &mut ParamStore, rng: &mut ChaCha8Rng, suffix: &str, rows: usize| {
            params.add(
                format!("{name}.{suffix}"),
                init_weights(rng, &[rows, hidden], rows, hidden, Init::GlorotUniform),
                true,
            )
        };
        let w_xr = mat(params, rng, "w_xr", in_dim);
        let w_hr = mat(params, rng, "w_hr", hidden);
        let b_r = params.add(format!("{name}.b_r"), Tensor::zeros(&[hidden]), true);
        let w_xz = mat(params, rng, "w_xz", in_dim);
        let w_hz = mat(params, rng, "w_hz", hidden);
        let b_z = params.add(format!("{name}.b_z"), Tensor::zeros(&[hidden]), true);
        let w_xn = mat(params, rng, "w_xn", in_dim);
        let b_xn = params.add(format!("{name}.b_xn"), Tensor::zeros(&[hidden]), true);
        let w_hn = mat(params, rng, "w_hn", hidden);
        let b_hn = params.add(format!("{name}.b_hn"), Tensor::zeros(&[hidden]), true);
        GruCell {
            w_xr,
            w_hr,
            b_r,
            w_xz,
            w_hz,
            b_z,
            w_xn,
            b_xn,
            w_hn,
            b_hn,
            hidden,
        }
    }

    /// One recurrence step: `x_t [B,in]`, `h [B,H]` -> `h_t [B,H]`.
    pub fn step(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        x_t: NodeId,
        h: NodeId,
    ) -> Result<NodeId> {
        let w_xr = tape.param(params, self.w_xr);
        let w_hr = tape.param(params, self.w_hr);
        let b_r = tape.param(params, self.b_r);
        let xr = tape.matmul(x_t, w_xr)?;
        let hr = tape.matmul(h, w_hr)?;
        let r_pre = tape.add(xr, hr)?;
        let r_pre = tape.add_bias(r_pre, b_r)?;
        let r = tape.sigmoid(r_pre);

        let w_xz = tape.param(params, self.w_xz);
        let w_hz = tape.param(params, self.w_hz);
        let b_z = tape.param(params, self.b_z);
        let xz = tape.matmul(x_t, w_xz)?;
        let hz = tape.matmul(h, w_hz)?;
        let z_pre = tape.add(xz, hz)?;
        let z_pre = tape.add_bias(z_pre, b_z)?;
        let z = tape.sigmoid(z_pre);

        let w_xn = tape.param(params, self.w_xn);
        let b_xn = tape.param(params, self.b_xn);
        let w_hn = tape.param(params, self.w_hn);
        let b_hn = tape.param(params, self.b_hn);
        let xn = tape.matmul(x_t, w_xn)?;
        let xn = tape.add_bias(xn, b_xn)?;
        let hn = tape.matmul(h, w_hn)?;
        let hn = tape.add_bias(hn, b_hn)?;
        let gated = tape.mul(r, hn)?;
        let n_pre = tape.add(xn, gated)?;
        let n = tape.tanh(n_pre);

        let keep = tape.mul(z, h)?;
        let one_minus_z = tape.one_minus(z);
        let update = tape.mul(one_minus_z, n)?;
        tape.add(update, keep)
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }
}

/// Recurrent layer emitting per-timestep hidden states.
#[derive(Debug, Clone)]
pub struct GruLayer {
    pub direction: Direction,
    forward_cell: GruCell,
    backward_cell: Option<GruCell>,
    hidden: usize,
}

impl GruLayer {
    pub fn new(
        params: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
        direction: Direction,
    ) -> Self {
        let forward_cell = GruCell::new(params, rng, &format!("{name}.fwd"), in_dim, hidden);
        let backward_cell = match direction {
            Direction::Bidirectional | Direction::Backward => Some(GruCell::new(
                params,
                rng,
                &format!("{name}.bwd"),
                in_dim,
                hidden,
            )),
            Direction::Forward => None,
        };
        GruLayer {
            direction,
            forward_cell,
            backward_cell,
            hidden,
        }
    }

    /// Output width per timestep: `H`, or `2H` when bidirectional.
    pub fn out_width(&self) -> usize {
        match self.direction {
            Direction::Bidirectional => 2 * self.hidden,
            _ => self.hidden,
        }
    }

    /// `[B,T,C] -> [B,T,out_width]`. Bidirectional outputs hold the forward
    /// direction in channels `0..H` and the backward direction in `H..2H`,
    /// both aligned to input time.
    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, x: NodeId) -> Result<NodeId> {
        let sh = tape.value(x).shape().to_vec();
        if sh.len() != 3 {
            return Err(Error::shape("gru", &[0, 0, 0], &sh));
        }
        let (b, t) = (sh[0], sh[1]);
        let slices: Vec<NodeId> = (0..t)
            .map(|ti| tape.slice_time(x, ti))
            .collect::<Result<_>>()?;

        let run = |tape: &mut Tape, cell: &GruCell, reverse: bool| -> Result<Vec<NodeId>> {
            let mut h = tape.input(Tensor::zeros(&[b, cell.hidden()]));
            let mut outs = vec![h; t];
            let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
            for ti in order {
                h = cell.step(tape, params, slices[ti], h)?;
                outs[ti] = h;
            }
            Ok(outs)
        };

        match self.direction {
            Direction::Forward => {
                let outs = run(tape, &self.forward_cell, false)?;
                tape.stack_time(&outs)
            }
            Direction::Backward => {
                let outs = run(tape, self.backward_cell.as_ref().expect("cell"), true)?;
                tape.stack_time(&outs)
            }
            Direction::Bidirectional => {
                let fw = run(tape, &self.forward_cell, false)?;
                let bw = run(tape, self.backward_cell.as_ref().expect("cell"), true)?;
                let fw = tape.stack_time(&fw)?;
                let bw = tape.stack_time(&bw)?;
                tape.concat_channels(&[fw, bw])
            }
        }
    }

    #[cfg(test)]
    pub(crate) fn forward_cell(&self) -> &GruCell {
        &self.forward_cell
    }
}

/// Multi-head scaled dot-product self-attention with output projection.
/// No mask is applied: classification uses full bidirectional context.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    wq: Dense,
    wk: Dense,
    wv: Dense,
    wo: Dense,
    heads: usize,
    model_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        params: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        model_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {model_dim} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Dense::new(params, rng, &format!("{name}.wq"), model_dim, model_dim, Init::GlorotUniform),
            wk: Dense::new(params, rng, &format!("{name}.wk"), model_dim, model_dim, Init::GlorotUniform),
            wv: Dense::new(params, rng, &format!("{name}.wv"), model_dim, model_dim, Init::GlorotUniform),
            wo: Dense::new(params, rng, &format!("{name}.wo"), model_dim, model_dim, Init::GlorotUniform),
            heads,
            model_dim,
        })
    }

    /// `[B,T,M] -> ([B,T,M], attention weights [B*heads, T, T])`.
    pub fn forward_with_weights(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let sh = tape.value(x).shape().to_vec();
        if sh.len() != 3 || sh[2] != self.model_dim {
            return Err(Error::shape("attention", &[0, 0, self.model_dim], &sh));
        }
        let (b, t) = (sh[0], sh[1]);
        let dh = self.model_dim / self.heads;

        let q = self.wq.forward_per_timestep(tape, params, x)?;
        let k = self.wk.forward_per_timestep(tape, params, x)?;
        let v = self.wv.forward_per_timestep(tape, params, x)?;
        let q = tape.split_heads(q, self.heads)?;
        let k = tape.split_heads(k, self.heads)?;
        let v = tape.split_heads(v, self.heads)?;

        let scores = tape.batched_matmul(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax(scores)?;
        let context = tape.batched_matmul(attn, v, false)?;
        let merged = tape.merge_heads(context, self.heads)?;
        let merged = tape.reshape(merged, &[b * t, self.model_dim])?;
        let out = self.wo.forward(tape, params, merged)?;
        let out = tape.reshape(out, &[b, t, self.model_dim])?;
        Ok((out, attn))
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, x: NodeId) -> Result<NodeId> {
        Ok(self.forward_with_weights(tape, params, x)?.0)
    }

    #[cfg(test)]
    pub(crate) fn value_proj(&self) -> (&Dense, &Dense) {
        (&self.wv, &self.wo)
    }
}

/// Layer normalisation over the last axis with learned affine.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub epsilon: f64,
}

impl LayerNorm {
    pub fn new(params: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gamma: params.add(format!("{name}.gamma"), Tensor::ones(&[width]), true),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[width]), true),
            epsilon: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, x: NodeId) -> Result<NodeId> {
        let gamma = tape.param(params, self.gamma);
        let beta = tape.param(params, self.beta);
        tape.layer_norm(x, gamma, beta, self.epsilon)
    }
}

/// Sinusoidal positional encoding table of shape `[T, M]`; every entry lies
/// in `[-1, 1]` and the table is a pure function of its arguments.
pub fn positional_encoding(t: usize, m: usize) -> Tensor {
    let mut table = Tensor::zeros(&[t, m]);
    for pos in 0..t {
        for j in 0..m {
            let pair = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / m as f64);
            let v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            table.set(&[pos, j], v);
        }
    }
    table
}

/// Max/avg pooling along time with the conventional `stride = k` default.
pub fn pool1d(tape: &mut Tape, x: NodeId, k: usize, kind: PoolKind) -> Result<NodeId> {
    tape.pool1d(x, k, k, kind, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn dense_identity_and_bias() {
        let mut params = ParamStore::new();
        let mut r = rng(1);
        let layer = Dense::new(&mut params, &mut r, "d", 2, 2, Init::GlorotUniform);
        *params.value_mut(layer.w) = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        *params.value_mut(layer.b) = Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let y = layer.forward(&mut tape, &params, x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 6.0]);
    }

    #[test]
    fn dense_rejects_mismatched_input() {
        let mut params = ParamStore::new();
        let mut r = rng(1);
        let layer = Dense::new(&mut params, &mut r, "d", 3, 2, Init::GlorotUniform);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[1, 4]));
        let err = layer.forward(&mut tape, &params, x).unwrap_err();
        let text = err.to_string();
        assert!(text.contains('3') && text.contains('4'), "message names both shapes: {text}");
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = activate(&mut tape, x, Activation::Relu);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let z = tape.input(Tensor::from_vec(vec![1], vec![0.0]).unwrap());
        let s = activate(&mut tape, z, Activation::Sigmoid);
        assert_eq!(tape.value(s).data(), &[0.5]);
    }

    #[test]
    fn smooth_activation_gradients_match_finite_differences() {
        use crate::gradcheck::{max_relative_error, numeric_gradients};
        let mut r = rng(21);
        for kind in [Activation::Tanh, Activation::Sigmoid] {
            let x = Tensor::from_vec(vec![6], (0..6).map(|_| r.random::<f64>() * 4.0 - 2.0).collect())
                .unwrap();
            let mut params = crate::params::ParamStore::new();
            let mut tape = Tape::new();
            let xn = tape.input(x.clone());
            let y = activate(&mut tape, xn, kind);
            let loss = tape.sum_all(y);
            tape.backward(loss, &mut params).unwrap();
            let analytic = vec![tape.grad(xn).unwrap().clone()];
            let numeric = numeric_gradients(
                |xs| {
                    let mut tape = Tape::new();
                    let xn = tape.input(xs[0].clone());
                    let y = activate(&mut tape, xn, kind);
                    let loss = tape.sum_all(y);
                    tape.value(loss).item()
                },
                &[x],
                1e-5,
            );
            let err = max_relative_error(&analytic, &numeric);
            assert!(err < 1e-6, "{kind:?}: relative error {err:e}");
        }
    }

    #[test]
    fn same_conv_requires_odd_kernel() {
        let mut params = ParamStore::new();
        let mut r = rng(2);
        let got = Conv1d::new(&mut params, &mut r, "c", 4, 1, 1, 1, Padding::Same, Init::HeUniform);
        assert!(matches!(got, Err(Error::Config(_))));
    }

    #[test]
    fn same_conv_preserves_length() {
        let mut params = ParamStore::new();
        let mut r = rng(2);
        let conv = Conv1d::new(&mut params, &mut r, "c", 5, 10, 4, 1, Padding::Same, Init::HeUniform).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2, 23, 10]));
        let y = conv.forward(&mut tape, &params, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 23, 4]);
        assert_eq!(conv.out_len(23).unwrap(), 23);
    }

    #[test]
    fn dropout_identity_cases() {
        let drop = Dropout::new(0.4).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::ones(&[8]));
        let mut ctx = ForwardCtx::eval();
        let y = drop.forward(&mut tape, x, &mut ctx).unwrap();
        assert_eq!(y, x);

        let zero = Dropout::new(0.0).unwrap();
        let mut r = rng(3);
        let mut ctx = ForwardCtx::train(&mut r);
        let y = zero.forward(&mut tape, x, &mut ctx).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        assert!(Dropout::new(1.0).is_err());
    }

    #[test]
    fn dropout_large_sample_statistics() {
        let drop = Dropout::new(0.2).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::ones(&[1_000_000]));
        let mut r = rng(11);
        let mut ctx = ForwardCtx::train(&mut r);
        let y = drop.forward(&mut tape, x, &mut ctx).unwrap();
        let data = tape.value(y).data();
        let zeroed = data.iter().filter(|&&v| v == 0.0).count() as f64 / data.len() as f64;
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        assert!((zeroed - 0.2).abs() < 0.005, "zeroed fraction {zeroed}");
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn gru_zero_params_fix_zero_input() {
        let mut params = ParamStore::new();
        let mut r = rng(4);
        let layer = GruLayer::new(&mut params, &mut r, "g", 3, 4, Direction::Forward);
        for i in 0..params.len() {
            params.value_mut(crate::params::ParamId(i)).fill(0.0);
        }
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2, 5, 3]));
        let y = layer.forward(&mut tape, &params, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_single_step_matches_hand_computation() {
        let mut params = ParamStore::new();
        let mut r = rng(5);
        let cell = GruCell::new(&mut params, &mut r, "g", 2, 2);
        let x = [0.3, -0.7];
        let h = [0.1, 0.4];

        // Hand evaluation of the documented equations.
        let m = |id: ParamId, row: usize, col: usize| params.value(id).at(&[row, col]);
        let vecmat = |v: &[f64], id: ParamId| -> Vec<f64> {
            (0..2)
                .map(|j| (0..v.len()).map(|i| v[i] * m(id, i, j)).sum::<f64>())
                .collect()
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let xr = vecmat(&x, cell.w_xr);
        let hr = vecmat(&h, cell.w_hr);
        let r_gate: Vec<f64> = (0..2).map(|j| sig(xr[j] + hr[j])).collect();
        let xz = vecmat(&x, cell.w_xz);
        let hz = vecmat(&h, cell.w_hz);
        let z_gate: Vec<f64> = (0..2).map(|j| sig(xz[j] + hz[j])).collect();
        let xn = vecmat(&x, cell.w_xn);
        let hn = vecmat(&h, cell.w_hn);
        let n: Vec<f64> = (0..2).map(|j| (xn[j] + r_gate[j] * hn[j]).tanh()).collect();
        let expect: Vec<f64> = (0..2)
            .map(|j| (1.0 - z_gate[j]) * n[j] + z_gate[j] * h[j])
            .collect();

        let mut tape = Tape::new();
        let xn_node = tape.input(Tensor::from_vec(vec![1, 2], x.to_vec()).unwrap());
        let hn_node = tape.input(Tensor::from_vec(vec![1, 2], h.to_vec()).unwrap());
        let out = cell.step(&mut tape, &params, xn_node, hn_node).unwrap();
        for j in 0..2 {
            assert!((tape.value(out).data()[j] - expect[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn bidirectional_gru_concatenates_directions() {
        let mut params = ParamStore::new();
        let mut r = rng(6);
        let layer = GruLayer::new(&mut params, &mut r, "g", 3, 4, Direction::Bidirectional);
        let mut rr = rng(7);
        let x = Tensor::from_vec(vec![2, 5, 3], (0..30).map(|_| rr.random::<f64>() - 0.5).collect()).unwrap();

        let mut tape = Tape::new();
        let xn = tape.input(x.clone());
        let y = layer.forward(&mut tape, &params, xn).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 5, 8]);

        // Forward half equals a unidirectional pass with the same cell.
        let uni = GruLayer {
            direction: Direction::Forward,
            forward_cell: layer.forward_cell().clone(),
            backward_cell: None,
            hidden: 4,
        };
        let mut tape2 = Tape::new();
        let xn2 = tape2.input(x);
        let y2 = uni.forward(&mut tape2, &params, xn2).unwrap();
        for b in 0..2 {
            for t in 0..5 {
                for j in 0..4 {
                    let full = tape.value(y).at(&[b, t, j]);
                    let single = tape2.value(y2).at(&[b, t, j]);
                    assert!((full - single).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut params = ParamStore::new();
        let mut r = rng(8);
        let mha = MultiHeadAttention::new(&mut params, &mut r, "a", 8, 2).unwrap();
        let mut rr = rng(9);
        let x = Tensor::from_vec(vec![2, 4, 8], (0..64).map(|_| rr.random::<f64>() - 0.5).collect()).unwrap();
        let mut tape = Tape::new();
        let xn = tape.input(x);
        let (_, attn) = mha.forward_with_weights(&mut tape, &params, xn).unwrap();
        let w = tape.value(attn);
        for row in w.data().chunks(4) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_single_key_is_value_projection() {
        let mut params = ParamStore::new();
        let mut r = rng(10);
        let mha = MultiHeadAttention::new(&mut params, &mut r, "a", 4, 2).unwrap();
        let x = Tensor::from_vec(vec![1, 1, 4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let mut tape = Tape::new();
        let xn = tape.input(x.clone());
        let (out, attn) = mha.forward_with_weights(&mut tape, &params, xn).unwrap();
        assert!(tape.value(attn).data().iter().all(|&w| w == 1.0));

        // With one timestep the context is exactly the value projection.
        let (wv, wo) = mha.value_proj();
        let mut tape2 = Tape::new();
        let flat = tape2.input(x.reshaped(&[1, 4]).unwrap());
        let v = wv.forward(&mut tape2, &params, flat).unwrap();
        let projected = wo.forward(&mut tape2, &params, v).unwrap();
        for j in 0..4 {
            assert!((tape.value(out).data()[j] - tape2.value(projected).data()[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut params = ParamStore::new();
        let mut r = rng(11);
        assert!(MultiHeadAttention::new(&mut params, &mut r, "a", 10, 3).is_err());
    }

    #[test]
    fn attention_single_head_matches_naive_oracle() {
        let mut params = ParamStore::new();
        let mut r = rng(12);
        let mha = MultiHeadAttention::new(&mut params, &mut r, "a", 4, 1).unwrap();
        let mut rr = rng(13);
        let x = Tensor::from_vec(vec![1, 3, 4], (0..12).map(|_| rr.random::<f64>() - 0.5).collect()).unwrap();

        // Naive loop oracle over the same projection weights.
        let proj = |w: &Dense, t: usize| -> Vec<f64> {
            (0..4)
                .map(|j| {
                    (0..4)
                        .map(|i| x.at(&[0, t, i]) * params.value(w.w).at(&[i, j]))
                        .sum::<f64>()
                        + params.value(w.b).data()[j]
                })
                .collect()
        };
        let (wv, wo) = mha.value_proj();
        let q: Vec<Vec<f64>> = (0..3).map(|t| proj(&mha.wq, t)).collect();
        let k: Vec<Vec<f64>> = (0..3).map(|t| proj(&mha.wk, t)).collect();
        let v: Vec<Vec<f64>> = (0..3).map(|t| proj(wv, t)).collect();
        let mut expect = vec![vec![0.0; 4]; 3];
        for tq in 0..3 {
            let scores: Vec<f64> = (0..3)
                .map(|tk| q[tq].iter().zip(&k[tk]).map(|(a, b)| a * b).sum::<f64>() / 2.0)
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let mut ctx = vec![0.0; 4];
            for tk in 0..3 {
                for j in 0..4 {
                    ctx[j] += exps[tk] / total * v[tk][j];
                }
            }
            for j in 0..4 {
                expect[tq][j] = (0..4)
                    .map(|i| ctx[i] * params.value(wo.w).at(&[i, j]))
                    .sum::<f64>()
                    + params.value(wo.b).data()[j];
            }
        }

        let mut tape = Tape::new();
        let xn = tape.input(x.clone());
        let out = mha.forward(&mut tape, &params, xn).unwrap();
        for t in 0..3 {
            for j in 0..4 {
                assert!(
                    (tape.value(out).at(&[0, t, j]) - expect[t][j]).abs() < 1e-10,
                    "mismatch at ({t},{j})"
                );
            }
        }
    }

    #[test]
    fn positional_encoding_properties() {
        let table = positional_encoding(23, 16);
        assert_eq!(table.at(&[0, 0]), 0.0);
        assert!(table.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let again = positional_encoding(23, 16);
        assert_eq!(table.data(), again.data());
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut params = ParamStore::new();
        let ln = LayerNorm::new(&mut params, "ln", 6);
        let mut r = rng(14);
        let x = Tensor::from_vec(vec![4, 6], (0..24).map(|_| r.random::<f64>() * 5.0).collect()).unwrap();
        let mut tape = Tape::new();
        let xn = tape.input(x);
        let y = ln.forward(&mut tape, &params, xn).unwrap();
        for row in tape.value(y).data().chunks(6) {
            let mean: f64 = row.iter().sum::<f64>() / 6.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-4);
        }

        // Constant rows collapse to zero under the epsilon guard.
        let mut tape = Tape::new();
        let xn = tape.input(Tensor::full(&[1, 6], 3.25));
        let y = ln.forward(&mut tape, &params, xn).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }
}
