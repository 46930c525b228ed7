//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every differentiable operation records a node holding its output value and
//! references to its inputs. Nodes are appended in execution order, so the
//! tape is already topologically sorted and [`Tape::backward`] replays it in
//! reverse, accumulating vector-Jacobian products. Leaf nodes snapshotting a
//! [`ParamId`] write their gradients back into the owning [`ParamStore`]
//! (accumulating, so gradients add up until `zero_gradients`).
//!
//! One backward pass per forward pass: a second `backward` on the same tape
//! is an error.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Whether stochastic/statistics-bearing layers run in training or inference
/// behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pooling flavour along the temporal axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    /// `[N,m,k] x [N,k,n]`, or `[N,m,k] x [N,n,k]` with `transpose_rhs`.
    BatchedMatmul {
        a: NodeId,
        b: NodeId,
        transpose_rhs: bool,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// Broadcast a `[d]` bias over the leading dimensions of `a`.
    AddBias {
        a: NodeId,
        bias: NodeId,
    },
    /// Add a constant `[T,M]` table to every batch row of a `[B,T,M]` input.
    AddTable {
        a: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        factor: f64,
    },
    OneMinus {
        a: NodeId,
    },
    Relu {
        a: NodeId,
    },
    Sigmoid {
        a: NodeId,
    },
    Tanh {
        a: NodeId,
    },
    /// Numerically stable softmax over the last axis.
    SoftmaxLast {
        a: NodeId,
    },
    Reshape {
        a: NodeId,
    },
    Conv1d {
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normalized: Tensor,
        inv_std: Vec<f64>,
        train: bool,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    Pool1d {
        x: NodeId,
        k: usize,
        stride: usize,
        kind: PoolKind,
        same: bool,
        argmax: Vec<usize>,
    },
    GlobalMaxPoolTime {
        x: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPoolTime {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    SliceTime {
        x: NodeId,
        t: usize,
    },
    StackTime {
        xs: Vec<NodeId>,
    },
    SliceChannels {
        x: NodeId,
        lo: usize,
    },
    ConcatChannels {
        xs: Vec<NodeId>,
    },
    SliceCols {
        x: NodeId,
        lo: usize,
    },
    ConcatCols {
        xs: Vec<NodeId>,
    },
    SplitHeads {
        x: NodeId,
        heads: usize,
    },
    MergeHeads {
        x: NodeId,
        heads: usize,
    },
    CrossEntropy {
        probs: NodeId,
        target: Tensor,
    },
    MeanSquaredError {
        preds: NodeId,
        target: Tensor,
    },
    SumAll {
        a: NodeId,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded forward pass, replayable once in reverse.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Tensor>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass with respect to node `id`.
    pub fn grad(&self, id: NodeId) -> Result<&Tensor> {
        if !self.consumed {
            return Err(Error::Tape("gradient requested before backward".into()));
        }
        Ok(&self.grads[id.0])
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    // ---- leaves ------------------------------------------------------

    /// Record a constant input. Its gradient is still tracked so callers can
    /// inspect d(loss)/d(input).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { param: None })
    }

    /// Snapshot a parameter value as a leaf; backward accumulates into the
    /// parameter's gradient.
    pub fn param(&mut self, params: &ParamStore, id: ParamId) -> NodeId {
        self.push(params.value(id).clone(), Op::Leaf { param: Some(id) })
    }

    // ---- linear algebra ----------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        matmul_into(av.data(), bv.data(), m, k, n, out.data_mut());
        Ok(self.push(out, Op::Matmul { a, b }))
    }

    /// Batched matmul over matching leading dimension.
    pub fn batched_matmul(&mut self, a: NodeId, b: NodeId, transpose_rhs: bool) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(Error::shape("batched_matmul", av.shape(), bv.shape()));
        }
        let (nb, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let n = if transpose_rhs { bv.shape()[1] } else { bv.shape()[2] };
        let inner = if transpose_rhs { bv.shape()[2] } else { bv.shape()[1] };
        if inner != k {
            return Err(Error::shape("batched_matmul", av.shape(), bv.shape()));
        }
        let mut out = Tensor::zeros(&[nb, m, n]);
        let bstride = bv.shape()[1] * bv.shape()[2];
        for i in 0..nb {
            let asl = &av.data()[i * m * k..(i + 1) * m * k];
            let bsl = &bv.data()[i * bstride..(i + 1) * bstride];
            let osl = &mut out.data_mut()[i * m * n..(i + 1) * m * n];
            if transpose_rhs {
                matmul_nt_into(asl, bsl, m, k, n, osl);
            } else {
                matmul_into(asl, bsl, m, k, n, osl);
            }
        }
        Ok(self.push(out, Op::BatchedMatmul { a, b, transpose_rhs }))
    }

    // ---- elementwise ---------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape("add", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = self.value(a).clone();
        for (o, r) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += r;
        }
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let d = *self.value(a).shape().last().expect("non-scalar");
        if self.value(bias).shape() != [d] {
            return Err(Error::shape("add_bias", &[d], self.value(bias).shape()));
        }
        let mut out = self.value(a).clone();
        let bv = self.value(bias).data().to_vec();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv[i % d];
        }
        Ok(self.push(out, Op::AddBias { a, bias }))
    }

    /// `[B,T,M] + table[T,M]`, table treated as a constant.
    pub fn add_table(&mut self, a: NodeId, table: &Tensor) -> Result<NodeId> {
        let sh = self.value(a).shape().to_vec();
        if sh.len() != 3 || table.shape() != [sh[1], sh[2]] {
            return Err(Error::shape("add_table", &sh, table.shape()));
        }
        let mut out = self.value(a).clone();
        let per = sh[1] * sh[2];
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += table.data()[i % per];
        }
        Ok(self.push(out, Op::AddTable { a }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape("mul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = self.value(a).clone();
        for (o, r) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= r;
        }
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        self.push(out, Op::Scale { a, factor })
    }

    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = 1.0 - *v);
        self.push(out, Op::OneMinus { a })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        self.push(out, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        self.push(out, Op::Tanh { a })
    }

    /// Softmax over the last axis with max-subtraction; preserves argmax and
    /// never overflows.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let sh = self.value(a).shape().to_vec();
        let c = *sh.last().ok_or_else(|| Error::Config("softmax on scalar".into()))?;
        if c < 1 {
            return Err(Error::Config("softmax needs at least one class".into()));
        }
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self.push(out, Op::SoftmaxLast { a }))
    }

    // ---- structural ------------------------------------------------------

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(a).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape { a }))
    }

    /// Select timestamp `t` of a `[B,T,C]` input as `[B,C]`.
    pub fn slice_time(&mut self, x: NodeId, t: usize) -> Result<NodeId> {
        let sh = self.value(x).shape().to_vec();
        if sh.len() != 3 || t >= sh[1] {
            return Err(Error::shape("slice_time", &sh, &[t]));
        }
        let (b, tt, c) = (sh[0], sh[1], sh[2]);
        let mut out = Tensor::zeros(&[b, c]);
        for bi in 0..b {
            let src = &self.value(x).data()[(bi * tt + t) * c..(bi * tt + t + 1) * c];
            out.data_mut()[bi * c..(bi + 1) * c].copy_from_slice(src);
        }
        Ok(self.push(out, Op::SliceTime { x, t }))
    }

    /// Stack `T` tensors of `[B,C]` into `[B,T,C]`, in the given time order.
    pub fn stack_time(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Config("stack_time of zero slices".into()));
        }
        let sh0 = self.value(xs[0]).shape().to_vec();
        let (b, c) = (sh0[0], sh0[1]);
        let t = xs.len();
        let mut out = Tensor::zeros(&[b, t, c]);
        for (ti, &x) in xs.iter().enumerate() {
            if self.value(x).shape() != [b, c] {
                return Err(Error::shape("stack_time", &[b, c], self.value(x).shape()));
            }
            for bi in 0..b {
                let src = &self.value(x).data()[bi * c..(bi + 1) * c];
                out.data_mut()[(bi * t + ti) * c..(bi * t + ti + 1) * c].copy_from_slice(src);
            }
        }
        Ok(self.push(out, Op::StackTime { xs: xs.to_vec() }))
    }

    /// Channel range `lo..hi` of a `[B,T,C]` input.
    pub fn slice_channels(&mut self, x: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let sh = self.value(x).shape().to_vec();
        if sh.len() != 3 || hi > sh[2] || lo >= hi {
            return Err(Error::shape("slice_channels", &sh, &[lo, hi]));
        }
        let (b, t, c) = (sh[0], sh[1], sh[2]);
        let w = hi - lo;
        let mut out = Tensor::zeros(&[b, t, w]);
        for bt in 0..b * t {
            let src = &self.value(x).data()[bt * c + lo..bt * c + hi];
            out.data_mut()[bt * w..(bt + 1) * w].copy_from_slice(src);
        }
        Ok(self.push(out, Op::SliceChannels { x, lo }))
    }

    /// Concatenate `[B,T,C_i]` tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Config("concat_channels of zero inputs".into()));
        }
        let sh0 = self.value(xs[0]).shape().to_vec();
        let (b, t) = (sh0[0], sh0[1]);
        let ctotal: usize = xs.iter().map(|&x| self.value(x).shape()[2]).sum();
        for &x in xs {
            let sh = self.value(x).shape();
            if sh.len() != 3 || sh[0] != b || sh[1] != t {
                return Err(Error::shape("concat_channels", &sh0, sh));
            }
        }
        let mut out = Tensor::zeros(&[b, t, ctotal]);
        for bt in 0..b * t {
            let mut off = 0;
            for &x in xs {
                let c = self.value(x).shape()[2];
                let src = &self.value(x).data()[bt * c..(bt + 1) * c];
                out.data_mut()[bt * ctotal + off..bt * ctotal + off + c].copy_from_slice(src);
                off += c;
            }
        }
        Ok(self.push(out, Op::ConcatChannels { xs: xs.to_vec() }))
    }

    /// Column range `lo..hi` of a `[B,D]` input.
    pub fn slice_cols(&mut self, x: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let sh = self.value(x).shape().to_vec();
        if sh.len() != 2 || hi > sh[1] || lo >= hi {
            return Err(Error::shape("slice_cols", &sh, &[lo, hi]));
        }
        let (b, d) = (sh[0], sh[1]);
        let w = hi - lo;
        let mut out = Tensor::zeros(&[b, w]);
        for bi in 0..b {
            let src = &self.value(x).data()[bi * d + lo..bi * d + hi];
            out.data_mut()[bi * w..(bi + 1) * w].copy_from_slice(src);
        }
        Ok(self.push(out, Op::SliceCols { x, lo }))
    }

    /// Concatenate `[B,D_i]` tensors along the feature axis.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Config("concat_cols of zero inputs".into()));
        }
        let b = self.value(xs[0]).shape()[0];
        let dtotal: usize = xs.iter().map(|&x| self.value(x).shape()[1]).sum();
        for &x in xs {
            let sh = self.value(x).shape();
            if sh.len() != 2 || sh[0] != b {
                return Err(Error::shape("concat_cols", &[b], sh));
            }
        }
        let mut out = Tensor::zeros(&[b, dtotal]);
        for bi in 0..b {
            let mut off = 0;
            for &x in xs {
                let d = self.value(x).shape()[1];
                let src = &self.value(x).data()[bi * d..(bi + 1) * d];
                out.data_mut()[bi * dtotal + off..bi * dtotal + off + d].copy_from_slice(src);
                off += d;
            }
        }
        Ok(self.push(out, Op::ConcatCols { xs: xs.to_vec() }))
    }

    /// `[B,T,M] -> [B*heads, T, M/heads]`, grouping contiguous feature blocks
    /// per head.
    pub fn split_heads(&mut self, x: NodeId, heads: usize) -> Result<NodeId> {
        let sh = self.value(x).shape().to_vec();
        if sh.len() != 3 || sh[2] % heads != 0 {
            return Err(Error::Config(format!(
                "split_heads: width {} not divisible by {} heads",
                sh[2], heads
            )));
        }
        let (b, t, m) = (sh[0], sh[1], sh[2]);
        let dh = m / heads;
        let mut out = Tensor::zeros(&[b * heads, t, dh]);
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    let src = &self.value(x).data()[(bi * t + ti) * m + h * dh..(bi * t + ti) * m + (h + 1) * dh];
                    let dst_base = (((bi * heads) + h) * t + ti) * dh;
                    out.data_mut()[dst_base..dst_base + dh].copy_from_slice(src);
                }
            }
        }
        Ok(self.push(out, Op::SplitHeads { x, heads }))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: NodeId, heads: usize) -> Result<NodeId> {
        let sh = self.value(x).shape().to_vec();
        if sh.len() != 3 || sh[0] % heads != 0 {
            return Err(Error::Config(format!(
                "merge_heads: leading dim {} not divisible by {} heads",
                sh[0], heads
            )));
        }
        let (bh, t, dh) = (sh[0], sh[1], sh[2]);
        let b = bh / heads;
        let m = dh * heads;
        let mut out = Tensor::zeros(&[b, t, m]);
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    let src_base = (((bi * heads) + h) * t + ti) * dh;
                    let src = &self.value(x).data()[src_base..src_base + dh];
                    out.data_mut()[(bi * t + ti) * m + h * dh..(bi * t + ti) * m + (h + 1) * dh]
                        .copy_from_slice(src);
                }
            }
        }
        Ok(self.push(out, Op::MergeHeads { x, heads }))
    }

    // ---- fused layers ------------------------------------------------------

    /// 1-D cross-correlation along time. `x: [B,T,C_in]`, `kernel: [k,C_in,C_out]`,
    /// `bias: [C_out]`; out-of-range input positions contribute zero.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        if xs.len() != 3 || ks.len() != 3 || xs[2] != ks[1] {
            return Err(Error::shape("conv1d", &xs, &ks));
        }
        let (b, t, c_in) = (xs[0], xs[1], xs[2]);
        let (k, c_out) = (ks[0], ks[2]);
        if self.value(bias).shape() != [c_out] {
            return Err(Error::shape("conv1d bias", &[c_out], self.value(bias).shape()));
        }
        if stride == 0 {
            return Err(Error::Config("conv1d stride must be >= 1".into()));
        }
        if k > t + 2 * pad {
            return Err(Error::Config(format!(
                "conv1d kernel {k} exceeds padded length {}",
                t + 2 * pad
            )));
        }
        let t_out = (t + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[b, t_out, c_out]);
        {
            let xd = self.value(x).data();
            let kd = self.value(kernel).data();
            let bd = self.value(bias).data();
            let od = out.data_mut();
            for bi in 0..b {
                for to in 0..t_out {
                    let orow = &mut od[(bi * t_out + to) * c_out..(bi * t_out + to + 1) * c_out];
                    orow.copy_from_slice(bd);
                    for tau in 0..k {
                        let u = (to * stride + tau) as isize - pad as isize;
                        if u < 0 || u >= t as isize {
                            continue;
                        }
                        let xrow = &xd[(bi * t + u as usize) * c_in..(bi * t + u as usize + 1) * c_in];
                        let kslab = &kd[tau * c_in * c_out..(tau + 1) * c_in * c_out];
                        for (ci, &xv) in xrow.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let krow = &kslab[ci * c_out..(ci + 1) * c_out];
                            for (o, &kv) in orow.iter_mut().zip(krow) {
                                *o += xv * kv;
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(out, Op::Conv1d { x, kernel, bias, stride, pad }))
    }

    /// Per-channel batch normalisation over the batch (and time for 3-D
    /// inputs). Train mode uses batch statistics and updates the running
    /// estimates in `params` with `new = (1-momentum)*old + momentum*batch`
    /// (biased batch variance); eval mode reads the running estimates.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        params: &mut ParamStore,
        running_mean: ParamId,
        running_var: ParamId,
        mode: Mode,
        epsilon: f64,
        momentum: f64,
    ) -> Result<NodeId> {
        let sh = self.value(x).shape().to_vec();
        let (groups, channels) = match sh.len() {
            2 => (sh[0], sh[1]),
            3 => (sh[0] * sh[1], sh[2]),
            _ => return Err(Error::shape("batch_norm", &[0, 0], &sh)),
        };
        if self.value(gamma).shape() != [channels] || self.value(beta).shape() != [channels] {
            return Err(Error::shape("batch_norm affine", &[channels], self.value(gamma).shape()));
        }
        if mode == Mode::Train && sh[0] < 2 {
            return Err(Error::DegenerateBatch(sh[0]));
        }

        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            Mode::Train => {
                let xd = self.value(x).data();
                let mut mean = vec![0.0; channels];
                for g in 0..groups {
                    for c in 0..channels {
                        mean[c] += xd[g * channels + c];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= groups as f64);
                let mut var = vec![0.0; channels];
                for g in 0..groups {
                    for c in 0..channels {
                        let d = xd[g * channels + c] - mean[c];
                        var[c] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= groups as f64);
                for c in 0..channels {
                    let rm = &mut params.value_mut(running_mean).data_mut()[c];
                    *rm = (1.0 - momentum) * *rm + momentum * mean[c];
                }
                for c in 0..channels {
                    let rv = &mut params.value_mut(running_var).data_mut()[c];
                    *rv = (1.0 - momentum) * *rv + momentum * var[c];
                }
                (mean, var)
            }
            Mode::Eval => (
                params.value(running_mean).data().to_vec(),
                params.value(running_var).data().to_vec(),
            ),
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
        let mut normalized = Tensor::zeros(&sh);
        let mut out = Tensor::zeros(&sh);
        {
            let xd = self.value(x).data();
            let gd = self.value(gamma).data();
            let bd = self.value(beta).data();
            let nd = normalized.data_mut();
            let od = out.data_mut();
            for g in 0..groups {
                for c in 0..channels {
                    let i = g * channels + c;
                    nd[i] = (xd[i] - mean[c]) * inv_std[c];
                    od[i] = gd[c] * nd[i] + bd[c];
                }
            }
        }
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
                train: mode == Mode::Train,
            },
        ))
    }

    /// Inverted dropout: zero entries with probability `p` and scale
    /// survivors by `1/(1-p)`. Callers skip the node entirely in eval mode.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut ChaCha8Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0,1)")));
        }
        let n = self.value(x).numel();
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep_scale })
            .collect();
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        Ok(self.push(out, Op::Dropout { x, mask }))
    }

    /// Windowed max/avg pooling along time. With `same`, windows are centred
    /// (stride 1, odd k) and clipped to the valid range; padding positions are
    /// excluded from both max and mean.
    pub fn pool1d(
        &mut self,
        x: NodeId,
        k: usize,
        stride: usize,
        kind: PoolKind,
        same: bool,
    ) -> Result<NodeId> {
        let sh = self.value(x).shape().to_vec();
        if sh.len() != 3 {
            return Err(Error::shape("pool1d", &[0, 0, 0], &sh));
        }
        let (b, t, c) = (sh[0], sh[1], sh[2]);
        if k == 0 || stride == 0 {
            return Err(Error::Config("pool1d needs k >= 1 and stride >= 1".into()));
        }
        if !same && k > t {
            return Err(Error::Config(format!("pool1d window {k} exceeds length {t}")));
        }
        if same && (stride != 1 || k % 2 == 0) {
            return Err(Error::Config("same pooling requires stride 1 and odd k".into()));
        }
        let t_out = if same { t } else { (t - k) / stride + 1 };
        let pad = if same { (k - 1) / 2 } else { 0 };
        let mut out = Tensor::zeros(&[b, t_out, c]);
        let mut argmax = vec![0usize; if kind == PoolKind::Max { b * t_out * c } else { 0 }];
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            for bi in 0..b {
                for to in 0..t_out {
                    let start = (to * stride) as isize - pad as isize;
                    let lo = start.max(0) as usize;
                    let hi = ((start + k as isize) as usize).min(t);
                    for ci in 0..c {
                        let oi = (bi * t_out + to) * c + ci;
                        match kind {
                            PoolKind::Max => {
                                let mut best = lo;
                                let mut best_v = xd[(bi * t + lo) * c + ci];
                                for u in lo + 1..hi {
                                    let v = xd[(bi * t + u) * c + ci];
                                    if v > best_v {
                                        best_v = v;
                                        best = u;
                                    }
                                }
                                od[oi] = best_v;
                                argmax[oi] = (bi * t + best) * c + ci;
                            }
                            PoolKind::Avg => {
                                let mut sum = 0.0;
                                for u in lo..hi {
                                    sum += xd[(bi * t + u) * c + ci];
                                }
                                od[oi] = sum / (hi - lo) as f64;
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(out, Op::Pool1d { x, k, stride, kind, same, argmax }))
    }

    /// Per-channel maximum over all timestamps: `[B,T,C] -> [B,C]`.
    pub fn global_max_pool_time(&mut self, x: NodeId) -> Result<NodeId> {
        let sh = self.value(x).shape().to_vec();
        if sh.len() != 3 || sh[1] == 0 {
            return Err(Error::shape("global_max_pool_time", &[0, 1, 0], &sh));
        }
        let (b, t, c) = (sh[0], sh[1], sh[2]);
        let mut out = Tensor::zeros(&[b, c]);
        let mut argmax = vec![0usize; b * c];
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            for bi in 0..b {
                for ci in 0..c {
                    let mut best = 0usize;
                    let mut best_v = xd[(bi * t) * c + ci];
                    for u in 1..t {
                        let v = xd[(bi * t + u) * c + ci];
                        if v > best_v {
                            best_v = v;
                            best = u;
                        }
                    }
                    od[bi * c + ci] = best_v;
                    argmax[bi * c + ci] = (bi * t + best) * c + ci;
                }
            }
        }
        Ok(self.push(out, Op::GlobalMaxPoolTime { x, argmax }))
    }

    /// Per-channel mean over all timestamps: `[B,T,C] -> [B,C]`.
    pub fn global_avg_pool_time(&mut self, x: NodeId) -> Result<NodeId> {
        let sh = self.value(x).shape().to_vec();
        if sh.len() != 3 || sh[1] == 0 {
            return Err(Error::shape("global_avg_pool_time", &[0, 1, 0], &sh));
        }
        let (b, t, c) = (sh[0], sh[1], sh[2]);
        let mut out = Tensor::zeros(&[b, c]);
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            for bi in 0..b {
                for u in 0..t {
                    for ci in 0..c {
                        od[bi * c + ci] += xd[(bi * t + u) * c + ci];
                    }
                }
                for ci in 0..c {
                    od[bi * c + ci] /= t as f64;
                }
            }
        }
        Ok(self.push(out, Op::GlobalAvgPoolTime { x }))
    }

    /// Normalise over the last axis per position, then apply `gamma`/`beta`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        epsilon: f64,
    ) -> Result<NodeId> {
        let sh = self.value(x).shape().to_vec();
        let m = *sh.last().ok_or_else(|| Error::Config("layer_norm on scalar".into()))?;
        if self.value(gamma).shape() != [m] || self.value(beta).shape() != [m] {
            return Err(Error::shape("layer_norm affine", &[m], self.value(gamma).shape()));
        }
        let rows = self.value(x).numel() / m;
        let mut normalized = Tensor::zeros(&sh);
        let mut out = Tensor::zeros(&sh);
        let mut inv_std = vec![0.0; rows];
        {
            let xd = self.value(x).data();
            let gd = self.value(gamma).data();
            let bd = self.value(beta).data();
            let nd = normalized.data_mut();
            let od = out.data_mut();
            for r in 0..rows {
                let row = &xd[r * m..(r + 1) * m];
                let mean = row.iter().sum::<f64>() / m as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                let inv = 1.0 / (var + epsilon).sqrt();
                inv_std[r] = inv;
                for j in 0..m {
                    let nh = (row[j] - mean) * inv;
                    nd[r * m + j] = nh;
                    od[r * m + j] = gd[j] * nh + bd[j];
                }
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, normalized, inv_std }))
    }

    // ---- losses ------------------------------------------------------------

    /// Mean over the batch of `-log p(true class)`, with probabilities
    /// clipped to `[1e-12, 1]` before the log.
    pub fn cross_entropy(&mut self, probs: NodeId, target: &Tensor) -> Result<NodeId> {
        if self.value(probs).shape() != target.shape() || self.value(probs).rank() != 2 {
            return Err(Error::shape("cross_entropy", target.shape(), self.value(probs).shape()));
        }
        let batch = target.shape()[0];
        let mut total = 0.0;
        for (p, y) in self.value(probs).data().iter().zip(target.data()) {
            if *y != 0.0 {
                total -= y * p.clamp(1e-12, 1.0).ln();
            }
        }
        let value = Tensor::scalar(total / batch as f64);
        Ok(self.push(value, Op::CrossEntropy { probs, target: target.clone() }))
    }

    /// Mean of squared differences over all entries.
    pub fn mse(&mut self, preds: NodeId, target: &Tensor) -> Result<NodeId> {
        if self.value(preds).shape() != target.shape() {
            return Err(Error::shape("mse", target.shape(), self.value(preds).shape()));
        }
        let n = target.numel() as f64;
        let total: f64 = self
            .value(preds)
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, y)| (p - y) * (p - y))
            .sum();
        let value = Tensor::scalar(total / n);
        Ok(self.push(value, Op::MeanSquaredError { preds, target: target.clone() }))
    }

    /// Sum of all entries as a scalar node.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(value, Op::SumAll { a })
    }

    // ---- backward ------------------------------------------------------------

    /// Replay the tape in reverse from the scalar `loss`, accumulating
    /// gradients into `params` for every parameter leaf.
    pub fn backward(&mut self, loss: NodeId, params: &mut ParamStore) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape("backward called twice on the same tape".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Tape("backward on a node not recorded on this tape".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape("backward loss", &[1], self.nodes[loss.0].value.shape()));
        }
        self.consumed = true;
        self.grads = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape()))
            .collect();
        self.grads[loss.0].data_mut()[0] = 1.0;

        for i in (0..=loss.0).rev() {
            let g = std::mem::replace(&mut self.grads[i], Tensor::zeros(&[0]));
            self.backward_node(i, &g, params)?;
            self.grads[i] = g;
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &Tensor, params: &mut ParamStore) -> Result<()> {
        // Helper: accumulate a flat slice into the grad buffer of `id`.
        macro_rules! acc {
            ($id:expr, $f:expr) => {{
                let buf = self.grads[$id.0].data_mut();
                $f(buf);
            }};
        }
        match &self.nodes[i].op {
            Op::Leaf { param } => {
                if let Some(pid) = *param {
                    params.accumulate_gradient(pid, g)?;
                }
            }
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a.0].value.shape()[0], self.nodes[a.0].value.shape()[1]);
                let n = self.nodes[b.0].value.shape()[1];
                let mut da = vec![0.0; m * k];
                matmul_nt_into(g.data(), self.nodes[b.0].value.data(), m, n, k, &mut da);
                acc!(a, |buf: &mut [f64]| add_assign(buf, &da));
                let mut db = vec![0.0; k * n];
                matmul_tn_into(self.nodes[a.0].value.data(), g.data(), m, k, n, &mut db);
                acc!(b, |buf: &mut [f64]| add_assign(buf, &db));
            }
            Op::BatchedMatmul { a, b, transpose_rhs } => {
                let (a, b, tr) = (*a, *b, *transpose_rhs);
                let ash = self.nodes[a.0].value.shape().to_vec();
                let bsh = self.nodes[b.0].value.shape().to_vec();
                let (nb, m, k) = (ash[0], ash[1], ash[2]);
                let n = if tr { bsh[1] } else { bsh[2] };
                let mut da = vec![0.0; nb * m * k];
                let mut db = vec![0.0; nb * bsh[1] * bsh[2]];
                for ib in 0..nb {
                    let gsl = &g.data()[ib * m * n..(ib + 1) * m * n];
                    let asl = &self.nodes[a.0].value.data()[ib * m * k..(ib + 1) * m * k];
                    let bsl = &self.nodes[b.0].value.data()[ib * bsh[1] * bsh[2]..(ib + 1) * bsh[1] * bsh[2]];
                    let dasl = &mut da[ib * m * k..(ib + 1) * m * k];
                    let dbsl = &mut db[ib * bsh[1] * bsh[2]..(ib + 1) * bsh[1] * bsh[2]];
                    if tr {
                        // C = A B^T: dA = dC B ; dB = dC^T A
                        matmul_into(gsl, bsl, m, n, k, dasl);
                        matmul_tn_into(gsl, asl, m, n, k, dbsl);
                    } else {
                        // C = A B: dA = dC B^T ; dB = A^T dC
                        matmul_nt_into(gsl, bsl, m, n, k, dasl);
                        matmul_tn_into(asl, gsl, m, k, n, dbsl);
                    }
                }
                acc!(a, |buf: &mut [f64]| add_assign(buf, &da));
                acc!(b, |buf: &mut [f64]| add_assign(buf, &db));
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                acc!(a, |buf: &mut [f64]| add_assign(buf, g.data()));
                acc!(b, |buf: &mut [f64]| add_assign(buf, g.data()));
            }
            Op::AddBias { a, bias } => {
                let (a, bias) = (*a, *bias);
                acc!(a, |buf: &mut [f64]| add_assign(buf, g.data()));
                let d = self.nodes[bias.0].value.numel();
                let mut db = vec![0.0; d];
                for (idx, gv) in g.data().iter().enumerate() {
                    db[idx % d] += gv;
                }
                acc!(bias, |buf: &mut [f64]| add_assign(buf, &db));
            }
            Op::AddTable { a } => {
                let a = *a;
                acc!(a, |buf: &mut [f64]| add_assign(buf, g.data()));
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let bd: Vec<f64> = self.nodes[b.0].value.data().to_vec();
                let ad: Vec<f64> = self.nodes[a.0].value.data().to_vec();
                acc!(a, |buf: &mut [f64]| {
                    for ((o, gv), bv) in buf.iter_mut().zip(g.data()).zip(&bd) {
                        *o += gv * bv;
                    }
                });
                acc!(b, |buf: &mut [f64]| {
                    for ((o, gv), av) in buf.iter_mut().zip(g.data()).zip(&ad) {
                        *o += gv * av;
                    }
                });
            }
            Op::Scale { a, factor } => {
                let (a, f) = (*a, *factor);
                acc!(a, |buf: &mut [f64]| {
                    for (o, gv) in buf.iter_mut().zip(g.data()) {
                        *o += gv * f;
                    }
                });
            }
            Op::OneMinus { a } => {
                let a = *a;
                acc!(a, |buf: &mut [f64]| {
                    for (o, gv) in buf.iter_mut().zip(g.data()) {
                        *o -= gv;
                    }
                });
            }
            Op::Relu { a } => {
                let a = *a;
                let xd: Vec<f64> = self.nodes[a.0].value.data().to_vec();
                acc!(a, |buf: &mut [f64]| {
                    for ((o, gv), xv) in buf.iter_mut().zip(g.data()).zip(&xd) {
                        if *xv > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Sigmoid { a } => {
                let a = *a;
                let yd: Vec<f64> = self.nodes[i].value.data().to_vec();
                acc!(a, |buf: &mut [f64]| {
                    for ((o, gv), yv) in buf.iter_mut().zip(g.data()).zip(&yd) {
                        *o += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Tanh { a } => {
                let a = *a;
                let yd: Vec<f64> = self.nodes[i].value.data().to_vec();
                acc!(a, |buf: &mut [f64]| {
                    for ((o, gv), yv) in buf.iter_mut().zip(g.data()).zip(&yd) {
                        *o += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::SoftmaxLast { a } => {
                let a = *a;
                let y = &self.nodes[i].value;
                let c = *y.shape().last().unwrap();
                let mut dx = vec![0.0; y.numel()];
                for (row, (yrow, grow)) in y.data().chunks(c).zip(g.data().chunks(c)).enumerate() {
                    let dot: f64 = yrow.iter().zip(grow).map(|(yv, gv)| yv * gv).sum();
                    for j in 0..c {
                        dx[row * c + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                acc!(a, |buf: &mut [f64]| add_assign(buf, &dx));
            }
            Op::Reshape { a } => {
                let a = *a;
                acc!(a, |buf: &mut [f64]| add_assign(buf, g.data()));
            }
            Op::Conv1d { x, kernel, bias, stride, pad } => {
                let (x, kernel, bias) = (*x, *kernel, *bias);
                let (stride, pad) = (*stride, *pad);
                let xsh = self.nodes[x.0].value.shape().to_vec();
                let ksh = self.nodes[kernel.0].value.shape().to_vec();
                let (b, t, c_in) = (xsh[0], xsh[1], xsh[2]);
                let (k, c_out) = (ksh[0], ksh[2]);
                let t_out = (t + 2 * pad - k) / stride + 1;
                let xd: &[f64] = self.nodes[x.0].value.data();
                let kd: &[f64] = self.nodes[kernel.0].value.data();
                let gd = g.data();

                let mut dbias = vec![0.0; c_out];
                for bt in 0..b * t_out {
                    for (db, gv) in dbias.iter_mut().zip(&gd[bt * c_out..(bt + 1) * c_out]) {
                        *db += gv;
                    }
                }
                let mut dk = vec![0.0; k * c_in * c_out];
                let mut dx = vec![0.0; b * t * c_in];
                for bi in 0..b {
                    for to in 0..t_out {
                        let grow = &gd[(bi * t_out + to) * c_out..(bi * t_out + to + 1) * c_out];
                        for tau in 0..k {
                            let u = (to * stride + tau) as isize - pad as isize;
                            if u < 0 || u >= t as isize {
                                continue;
                            }
                            let u = u as usize;
                            let xrow = &xd[(bi * t + u) * c_in..(bi * t + u + 1) * c_in];
                            for ci in 0..c_in {
                                let krow = &kd[(tau * c_in + ci) * c_out..(tau * c_in + ci + 1) * c_out];
                                let dkrow = &mut dk[(tau * c_in + ci) * c_out..(tau * c_in + ci + 1) * c_out];
                                let xv = xrow[ci];
                                let mut dot = 0.0;
                                for o in 0..c_out {
                                    dkrow[o] += xv * grow[o];
                                    dot += krow[o] * grow[o];
                                }
                                dx[(bi * t + u) * c_in + ci] += dot;
                            }
                        }
                    }
                }
                acc!(x, |buf: &mut [f64]| add_assign(buf, &dx));
                acc!(kernel, |buf: &mut [f64]| add_assign(buf, &dk));
                acc!(bias, |buf: &mut [f64]| add_assign(buf, &dbias));
            }
            Op::BatchNorm { x, gamma, beta, normalized, inv_std, train } => {
                let (x, gamma, beta, train) = (*x, *gamma, *beta, *train);
                let sh = self.nodes[x.0].value.shape().to_vec();
                let channels = *sh.last().unwrap();
                let groups = self.nodes[x.0].value.numel() / channels;
                let gd_gamma: Vec<f64> = self.nodes[gamma.0].value.data().to_vec();
                let nd = normalized.data();
                let inv = inv_std.clone();

                let mut dgamma = vec![0.0; channels];
                let mut dbeta = vec![0.0; channels];
                for gi in 0..groups {
                    for c in 0..channels {
                        let idx = gi * channels + c;
                        dgamma[c] += g.data()[idx] * nd[idx];
                        dbeta[c] += g.data()[idx];
                    }
                }

                let mut dx = vec![0.0; groups * channels];
                if train {
                    // dX = gamma*inv_std/m * (m*dY - sum(dY) - Xhat*sum(dY*Xhat))
                    let m = groups as f64;
                    for c in 0..channels {
                        let sum_dy = dbeta[c];
                        let sum_dy_xhat = dgamma[c];
                        let coef = gd_gamma[c] * inv[c] / m;
                        for gi in 0..groups {
                            let idx = gi * channels + c;
                            dx[idx] = coef * (m * g.data()[idx] - sum_dy - nd[idx] * sum_dy_xhat);
                        }
                    }
                } else {
                    for c in 0..channels {
                        let coef = gd_gamma[c] * inv[c];
                        for gi in 0..groups {
                            let idx = gi * channels + c;
                            dx[idx] = coef * g.data()[idx];
                        }
                    }
                }
                acc!(x, |buf: &mut [f64]| add_assign(buf, &dx));
                acc!(gamma, |buf: &mut [f64]| add_assign(buf, &dgamma));
                acc!(beta, |buf: &mut [f64]| add_assign(buf, &dbeta));
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                let mask = mask.clone();
                acc!(x, |buf: &mut [f64]| {
                    for ((o, gv), mv) in buf.iter_mut().zip(g.data()).zip(&mask) {
                        *o += gv * mv;
                    }
                });
            }
            Op::Pool1d { x, k, stride, kind, same, argmax } => {
                let x = *x;
                match kind {
                    PoolKind::Max => {
                        let argmax = argmax.clone();
                        acc!(x, |buf: &mut [f64]| {
                            for (oi, gv) in g.data().iter().enumerate() {
                                buf[argmax[oi]] += gv;
                            }
                        });
                    }
                    PoolKind::Avg => {
                        let (k, stride, same) = (*k, *stride, *same);
                        let sh = self.nodes[x.0].value.shape().to_vec();
                        let (b, t, c) = (sh[0], sh[1], sh[2]);
                        let t_out = if same { t } else { (t - k) / stride + 1 };
                        let pad = if same { (k - 1) / 2 } else { 0 };
                        let mut dx = vec![0.0; b * t * c];
                        for bi in 0..b {
                            for to in 0..t_out {
                                let start = (to * stride) as isize - pad as isize;
                                let lo = start.max(0) as usize;
                                let hi = ((start + k as isize) as usize).min(t);
                                let inv = 1.0 / (hi - lo) as f64;
                                for ci in 0..c {
                                    let gv = g.data()[(bi * t_out + to) * c + ci] * inv;
                                    for u in lo..hi {
                                        dx[(bi * t + u) * c + ci] += gv;
                                    }
                                }
                            }
                        }
                        acc!(x, |buf: &mut [f64]| add_assign(buf, &dx));
                    }
                }
            }
            Op::GlobalMaxPoolTime { x, argmax } => {
                let x = *x;
                let argmax = argmax.clone();
                acc!(x, |buf: &mut [f64]| {
                    for (oi, gv) in g.data().iter().enumerate() {
                        buf[argmax[oi]] += gv;
                    }
                });
            }
            Op::GlobalAvgPoolTime { x } => {
                let x = *x;
                let sh = self.nodes[x.0].value.shape().to_vec();
                let (b, t, c) = (sh[0], sh[1], sh[2]);
                let inv = 1.0 / t as f64;
                acc!(x, |buf: &mut [f64]| {
                    for bi in 0..b {
                        for u in 0..t {
                            for ci in 0..c {
                                buf[(bi * t + u) * c + ci] += g.data()[bi * c + ci] * inv;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, normalized, inv_std } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let m = *self.nodes[x.0].value.shape().last().unwrap();
                let rows = self.nodes[x.0].value.numel() / m;
                let gv: Vec<f64> = self.nodes[gamma.0].value.data().to_vec();
                let nd = normalized.data();
                let inv = inv_std.clone();

                let mut dgamma = vec![0.0; m];
                let mut dbeta = vec![0.0; m];
                let mut dx = vec![0.0; rows * m];
                for r in 0..rows {
                    let grow = &g.data()[r * m..(r + 1) * m];
                    let nrow = &nd[r * m..(r + 1) * m];
                    let mut sum_gy = 0.0;
                    let mut sum_gy_xhat = 0.0;
                    for j in 0..m {
                        dgamma[j] += grow[j] * nrow[j];
                        dbeta[j] += grow[j];
                        let gy = grow[j] * gv[j];
                        sum_gy += gy;
                        sum_gy_xhat += gy * nrow[j];
                    }
                    let mf = m as f64;
                    for j in 0..m {
                        let gy = grow[j] * gv[j];
                        dx[r * m + j] = inv[r] * (gy - sum_gy / mf - nrow[j] * sum_gy_xhat / mf);
                    }
                }
                acc!(x, |buf: &mut [f64]| add_assign(buf, &dx));
                acc!(gamma, |buf: &mut [f64]| add_assign(buf, &dgamma));
                acc!(beta, |buf: &mut [f64]| add_assign(buf, &dbeta));
            }
            Op::SliceTime { x, t } => {
                let (x, t) = (*x, *t);
                let sh = self.nodes[x.0].value.shape().to_vec();
                let (b, tt, c) = (sh[0], sh[1], sh[2]);
                acc!(x, |buf: &mut [f64]| {
                    for bi in 0..b {
                        for ci in 0..c {
                            buf[(bi * tt + t) * c + ci] += g.data()[bi * c + ci];
                        }
                    }
                });
            }
            Op::StackTime { xs } => {
                let xs = xs.clone();
                let t = xs.len();
                for (ti, xid) in xs.iter().enumerate() {
                    let sh = self.nodes[xid.0].value.shape().to_vec();
                    let (b, c) = (sh[0], sh[1]);
                    acc!(xid, |buf: &mut [f64]| {
                        for bi in 0..b {
                            for ci in 0..c {
                                buf[bi * c + ci] += g.data()[(bi * t + ti) * c + ci];
                            }
                        }
                    });
                }
            }
            Op::SliceChannels { x, lo } => {
                let (x, lo) = (*x, *lo);
                let sh = self.nodes[x.0].value.shape().to_vec();
                let c = sh[2];
                let w = *g.shape().last().unwrap();
                let bt = sh[0] * sh[1];
                acc!(x, |buf: &mut [f64]| {
                    for bti in 0..bt {
                        for j in 0..w {
                            buf[bti * c + lo + j] += g.data()[bti * w + j];
                        }
                    }
                });
            }
            Op::ConcatChannels { xs } => {
                let xs = xs.clone();
                let ctotal = *g.shape().last().unwrap();
                let bt = g.numel() / ctotal;
                let mut off = 0;
                for xid in &xs {
                    let c = self.nodes[xid.0].value.shape()[2];
                    acc!(xid, |buf: &mut [f64]| {
                        for bti in 0..bt {
                            for j in 0..c {
                                buf[bti * c + j] += g.data()[bti * ctotal + off + j];
                            }
                        }
                    });
                    off += c;
                }
            }
            Op::SliceCols { x, lo } => {
                let (x, lo) = (*x, *lo);
                let d = self.nodes[x.0].value.shape()[1];
                let w = g.shape()[1];
                let b = g.shape()[0];
                acc!(x, |buf: &mut [f64]| {
                    for bi in 0..b {
                        for j in 0..w {
                            buf[bi * d + lo + j] += g.data()[bi * w + j];
                        }
                    }
                });
            }
            Op::ConcatCols { xs } => {
                let xs = xs.clone();
                let dtotal = g.shape()[1];
                let b = g.shape()[0];
                let mut off = 0;
                for xid in &xs {
                    let d = self.nodes[xid.0].value.shape()[1];
                    acc!(xid, |buf: &mut [f64]| {
                        for bi in 0..b {
                            for j in 0..d {
                                buf[bi * d + j] += g.data()[bi * dtotal + off + j];
                            }
                        }
                    });
                    off += d;
                }
            }
            Op::SplitHeads { x, heads } => {
                let (x, heads) = (*x, *heads);
                let sh = self.nodes[x.0].value.shape().to_vec();
                let (b, t, m) = (sh[0], sh[1], sh[2]);
                let dh = m / heads;
                acc!(x, |buf: &mut [f64]| {
                    for bi in 0..b {
                        for h in 0..heads {
                            for ti in 0..t {
                                let src_base = (((bi * heads) + h) * t + ti) * dh;
                                for j in 0..dh {
                                    buf[(bi * t + ti) * m + h * dh + j] += g.data()[src_base + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { x, heads } => {
                let (x, heads) = (*x, *heads);
                let sh = self.nodes[x.0].value.shape().to_vec();
                let (bh, t, dh) = (sh[0], sh[1], sh[2]);
                let b = bh / heads;
                let m = dh * heads;
                acc!(x, |buf: &mut [f64]| {
                    for bi in 0..b {
                        for h in 0..heads {
                            for ti in 0..t {
                                let dst_base = (((bi * heads) + h) * t + ti) * dh;
                                for j in 0..dh {
                                    buf[dst_base + j] += g.data()[(bi * t + ti) * m + h * dh + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { probs, target } => {
                let probs = *probs;
                let target = target.clone();
                let batch = target.shape()[0] as f64;
                let gscale = g.item();
                let pd: Vec<f64> = self.nodes[probs.0].value.data().to_vec();
                acc!(probs, |buf: &mut [f64]| {
                    for (idx, (p, y)) in pd.iter().zip(target.data()).enumerate() {
                        if *y != 0.0 && *p > 1e-12 && *p <= 1.0 {
                            buf[idx] -= gscale * y / (p * batch);
                        }
                    }
                });
            }
            Op::MeanSquaredError { preds, target } => {
                let preds = *preds;
                let target = target.clone();
                let n = target.numel() as f64;
                let gscale = g.item();
                let pd: Vec<f64> = self.nodes[preds.0].value.data().to_vec();
                acc!(preds, |buf: &mut [f64]| {
                    for (idx, (p, y)) in pd.iter().zip(target.data()).enumerate() {
                        buf[idx] += gscale * 2.0 * (p - y) / n;
                    }
                });
            }
            Op::SumAll { a } => {
                let a = *a;
                let gv = g.item();
                acc!(a, |buf: &mut [f64]| {
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `out += a[m,k] * b[k,n]` (out must be zeroed by the caller).
fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a[m,k] * b[n,k]^T`.
fn matmul_nt_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut dot = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                dot += av * bv;
            }
            out[i * n + j] += dot;
        }
    }
}

/// `out += a[k,m]^T * b[k,n]`.
fn matmul_tn_into(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn sum_of_param_has_unit_gradients() {
        let mut params = ParamStore::new();
        let w = params.add("w", Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let mut tape = Tape::new();
        let leaf = tape.param(&params, w);
        let loss = tape.sum_all(leaf);
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.gradient(w).data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn gradients_accumulate_across_backwards() {
        let mut params = ParamStore::new();
        let w = params.add("w", Tensor::ones(&[3]), true);
        for _ in 0..2 {
            let mut tape = Tape::new();
            let leaf = tape.param(&params, w);
            let loss = tape.sum_all(leaf);
            tape.backward(loss, &mut params).unwrap();
        }
        assert_eq!(params.gradient(w).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut params = ParamStore::new();
        let w = params.add("w", Tensor::ones(&[2]), true);
        let mut tape = Tape::new();
        let leaf = tape.param(&params, w);
        let loss = tape.sum_all(leaf);
        tape.backward(loss, &mut params).unwrap();
        assert!(matches!(tape.backward(loss, &mut params), Err(Error::Tape(_))));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut params = ParamStore::new();
        let w = params.add("w", Tensor::ones(&[2]), true);
        let mut tape = Tape::new();
        let leaf = tape.param(&params, w);
        assert!(matches!(
            tape.backward(leaf, &mut params),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut r = rng(3);
        let a = Tensor::from_vec(vec![3, 4], (0..12).map(|_| r.random::<f64>() - 0.5).collect()).unwrap();
        let b = Tensor::from_vec(vec![4, 2], (0..8).map(|_| r.random::<f64>() - 0.5).collect()).unwrap();
        let mut tape = Tape::new();
        let an = tape.input(a.clone());
        let bn = tape.input(b.clone());
        let c = tape.matmul(an, bn).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut expect = 0.0;
                for kk in 0..4 {
                    expect += a.at(&[i, kk]) * b.at(&[kk, j]);
                }
                assert!((tape.value(c).at(&[i, j]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_are_stable_and_normalized() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![2, 2], vec![1000.0, 0.0, 0.0, 0.0]).unwrap());
        let y = tape.softmax(x).unwrap();
        let v = tape.value(y);
        assert!(v.at(&[0, 0]) > 0.999999 && v.at(&[0, 1]) < 1e-9);
        assert!((v.at(&[1, 0]) - 0.5).abs() < 1e-12);
        assert!(!v.has_non_finite());
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::ones(&[1000]));
        let mut r = rng(9);
        let y = tape.dropout(x, 0.5, &mut r).unwrap();
        for &v in tape.value(y).data() {
            assert!(v == 0.0 || (v - 2.0).abs() < 1e-12);
        }
        assert!(tape.dropout(x, 1.0, &mut r).is_err());
    }

    #[test]
    fn split_merge_heads_round_trip() {
        let mut r = rng(4);
        let x = Tensor::from_vec(vec![2, 3, 4], (0..24).map(|_| r.random()).collect()).unwrap();
        let mut tape = Tape::new();
        let xn = tape.input(x.clone());
        let s = tape.split_heads(xn, 2).unwrap();
        let m = tape.merge_heads(s, 2).unwrap();
        assert_eq!(tape.value(m).data(), x.data());
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![1, 5, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let k = tape.input(Tensor::ones(&[1, 1, 1]));
        let b = tape.input(Tensor::zeros(&[1]));
        let y = tape.conv1d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn conv1d_sliding_sum() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![1, 5, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let k = tape.input(Tensor::ones(&[3, 1, 1]));
        let b = tape.input(Tensor::zeros(&[1]));
        let y = tape.conv1d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 3, 1]);
        assert_eq!(tape.value(y).data(), &[6.0, 9.0, 12.0]);
    }

    #[test]
    fn conv1d_rejects_oversized_kernel() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[1, 3, 1]));
        let k = tape.input(Tensor::zeros(&[5, 1, 1]));
        let b = tape.input(Tensor::zeros(&[1]));
        assert!(matches!(tape.conv1d(x, k, b, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn pool_examples() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![1, 4, 1], vec![1.0, 3.0, 2.0, 5.0]).unwrap());
        let mx = tape.pool1d(x, 2, 2, PoolKind::Max, false).unwrap();
        assert_eq!(tape.value(mx).data(), &[3.0, 5.0]);
        let av = tape.pool1d(x, 2, 2, PoolKind::Avg, false).unwrap();
        assert_eq!(tape.value(av).data(), &[2.0, 3.5]);
        assert!(tape.pool1d(x, 5, 5, PoolKind::Max, false).is_err());
    }

    #[test]
    fn global_max_pool_examples() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![1, 3, 2], vec![1.0, 9.0, 4.0, 2.0, 3.0, 3.0]).unwrap());
        let y = tape.global_max_pool_time(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 9.0]);

        let one = tape.input(Tensor::from_vec(vec![1, 1, 2], vec![7.0, 8.0]).unwrap());
        let ys = tape.global_max_pool_time(one).unwrap();
        assert_eq!(tape.value(ys).data(), &[7.0, 8.0]);
    }

    #[test]
    fn batch_norm_normalizes_per_channel() {
        let mut params = ParamStore::new();
        let gamma = params.add("g", Tensor::ones(&[2]), true);
        let beta = params.add("b", Tensor::zeros(&[2]), true);
        let rm = params.add("rm", Tensor::zeros(&[2]), false);
        let rv = params.add("rv", Tensor::ones(&[2]), false);
        let mut r = rng(5);
        let x = Tensor::from_vec(vec![8, 2], (0..16).map(|_| r.random::<f64>() * 3.0).collect()).unwrap();
        let mut tape = Tape::new();
        let xn = tape.input(x);
        let gn = tape.param(&params, gamma);
        let bn = tape.param(&params, beta);
        let y = tape
            .batch_norm(xn, gn, bn, &mut params, rm, rv, Mode::Train, 1e-5, 0.1)
            .unwrap();
        let yv = tape.value(y);
        for c in 0..2 {
            let vals: Vec<f64> = (0..8).map(|g| yv.at(&[g, c])).collect();
            let mean: f64 = vals.iter().sum::<f64>() / 8.0;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_rejects_batch_of_one_in_train() {
        let mut params = ParamStore::new();
        let gamma = params.add("g", Tensor::ones(&[2]), true);
        let beta = params.add("b", Tensor::zeros(&[2]), true);
        let rm = params.add("rm", Tensor::zeros(&[2]), false);
        let rv = params.add("rv", Tensor::ones(&[2]), false);
        let mut tape = Tape::new();
        let xn = tape.input(Tensor::zeros(&[1, 2]));
        let gn = tape.param(&params, gamma);
        let bn = tape.param(&params, beta);
        let got = tape.batch_norm(xn, gn, bn, &mut params, rm, rv, Mode::Train, 1e-5, 0.1);
        assert!(matches!(got, Err(Error::DegenerateBatch(1))));
    }

    #[test]
    fn cross_entropy_examples() {
        // Perfect prediction: zero loss.
        let mut tape = Tape::new();
        let p = tape.input(Tensor::from_vec(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap());
        let y = Tensor::from_vec(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let l = tape.cross_entropy(p, &y).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);

        // Uniform prediction over 9 classes: ln 9.
        let mut tape = Tape::new();
        let p = tape.input(Tensor::full(&[1, 9], 1.0 / 9.0));
        let mut target = Tensor::zeros(&[1, 9]);
        target.data_mut()[4] = 1.0;
        let l = tape.cross_entropy(p, &target).unwrap();
        assert!((tape.value(l).item() - 9.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mse_closed_forms() {
        let mut tape = Tape::new();
        let p = tape.input(Tensor::zeros(&[4, 5]));
        let mut target = Tensor::zeros(&[4, 5]);
        for r in 0..4 {
            target.set(&[r, r], 1.0);
        }
        let l = tape.mse(p, &target).unwrap();
        assert!((tape.value(l).item() - 1.0 / 5.0).abs() < 1e-12);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_normalize_and_keep_argmax(
                rows in proptest::collection::vec(
                    proptest::collection::vec(-50.0..50.0f64, 4), 1..6)
            ) {
                let b = rows.len();
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                let x = Tensor::from_vec(vec![b, 4], flat).unwrap();
                let mut tape = Tape::new();
                let xn = tape.input(x.clone());
                let y = tape.softmax(xn).unwrap();
                let yv = tape.value(y);
                for r in 0..b {
                    let sum: f64 = (0..4).map(|j| yv.at(&[r, j])).sum();
                    prop_assert!((sum - 1.0).abs() < 1e-9);
                    prop_assert!((0..4).all(|j| yv.at(&[r, j]) > 0.0));
                    prop_assert_eq!(x.argmax_row(r), yv.argmax_row(r));
                }
            }

            #[test]
            fn global_max_pool_is_time_permutation_invariant(
                values in proptest::collection::vec(-10.0..10.0f64, 12),
                swap in (0usize..6, 0usize..6)
            ) {
                // [1, 6, 2] input; swap two timestamps.
                let x = Tensor::from_vec(vec![1, 6, 2], values).unwrap();
                let mut permuted = x.clone();
                for c in 0..2 {
                    let a = x.at(&[0, swap.0, c]);
                    let b = x.at(&[0, swap.1, c]);
                    permuted.set(&[0, swap.0, c], b);
                    permuted.set(&[0, swap.1, c], a);
                }
                let mut tape = Tape::new();
                let a = tape.input(x);
                let b = tape.input(permuted);
                let pa = tape.global_max_pool_time(a).unwrap();
                let pb = tape.global_max_pool_time(b).unwrap();
                prop_assert_eq!(tape.value(pa).data(), tape.value(pb).data());
            }
        }
    }
}
