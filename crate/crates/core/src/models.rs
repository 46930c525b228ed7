//! Declarative model configurations and builders for the six surveyed
//! time-series classification architectures.
//!
//! Every builder is a pure function of `(config, T, C, N, seed)`: rebuilding
//! with the same arguments yields bit-identical initial parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    positional_encoding, BatchNorm1d, Conv1d, Dense, Direction, Dropout, ForwardCtx, GruLayer,
    Init, LayerNorm, MultiHeadAttention, Padding,
};
use crate::params::ParamStore;
use crate::tape::{Mode, NodeId, PoolKind, Tape};
use crate::tensor::Tensor;

/// Output head family; determines the compatible loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Probability rows summing to one; paired with cross-entropy.
    Softmax,
    /// Independent per-class sigmoids; paired with mean squared error.
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelVariant {
    TemporalCnn,
    Mcdcnn,
    TimeCnn,
    Rnn,
    InceptionTime,
    Transformer,
}

impl ModelVariant {
    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::TemporalCnn => "temporal_cnn",
            ModelVariant::Mcdcnn => "mcdcnn",
            ModelVariant::TimeCnn => "time_cnn",
            ModelVariant::Rnn => "rnn",
            ModelVariant::InceptionTime => "inception_time",
            ModelVariant::Transformer => "transformer",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "temporal_cnn" => ModelVariant::TemporalCnn,
            "mcdcnn" => ModelVariant::Mcdcnn,
            "time_cnn" => ModelVariant::TimeCnn,
            "rnn" => ModelVariant::Rnn,
            "inception_time" => ModelVariant::InceptionTime,
            "transformer" => ModelVariant::Transformer,
            other => {
                return Err(Error::UnknownName {
                    name: other.into(),
                    known: "temporal_cnn, mcdcnn, time_cnn, rnn, inception_time, transformer".into(),
                })
            }
        })
    }

    pub fn all() -> [ModelVariant; 6] {
        [
            ModelVariant::TemporalCnn,
            ModelVariant::Mcdcnn,
            ModelVariant::TimeCnn,
            ModelVariant::Rnn,
            ModelVariant::InceptionTime,
            ModelVariant::Transformer,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalCnnConfig {
    pub nb_conv_layers: usize,
    pub nb_conv_units: usize,
    pub nb_fc_units: usize,
    pub filter_size: usize,
    pub dropout: f64,
}

impl Default for TemporalCnnConfig {
    /// Baseline layout: three convolutional blocks of 64 units, a 256-unit
    /// dense block, filter 5, dropout 0.182.
    fn default() -> Self {
        TemporalCnnConfig {
            nb_conv_layers: 3,
            nb_conv_units: 64,
            nb_fc_units: 256,
            filter_size: 5,
            dropout: 0.182,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McdcnnConfig {
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeCnnConfig {
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnnConfig {
    pub layers: usize,
    pub hidden: usize,
    pub fc_units: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InceptionTimeConfig {
    pub modules: usize,
    pub filters: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    pub heads: usize,
    pub encoder_layers: usize,
    pub d_model: usize,
    pub d_inner: usize,
    pub dropout: f64,
}

/// Architecture choice plus its hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelConfig {
    TemporalCnn(TemporalCnnConfig),
    Mcdcnn(McdcnnConfig),
    TimeCnn(TimeCnnConfig),
    Rnn(RnnConfig),
    InceptionTime(InceptionTimeConfig),
    Transformer(TransformerConfig),
}

impl ModelConfig {
    pub fn variant(&self) -> ModelVariant {
        match self {
            ModelConfig::TemporalCnn(_) => ModelVariant::TemporalCnn,
            ModelConfig::Mcdcnn(_) => ModelVariant::Mcdcnn,
            ModelConfig::TimeCnn(_) => ModelVariant::TimeCnn,
            ModelConfig::Rnn(_) => ModelVariant::Rnn,
            ModelConfig::InceptionTime(_) => ModelVariant::InceptionTime,
            ModelConfig::Transformer(_) => ModelVariant::Transformer,
        }
    }

    pub fn dropout(&self) -> f64 {
        match self {
            ModelConfig::TemporalCnn(c) => c.dropout,
            ModelConfig::Mcdcnn(c) => c.dropout,
            ModelConfig::TimeCnn(c) => c.dropout,
            ModelConfig::Rnn(c) => c.dropout,
            ModelConfig::InceptionTime(c) => c.dropout,
            ModelConfig::Transformer(c) => c.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dropout();
        if !(0.0..=0.5).contains(&d) {
            return Err(Error::Config(format!("dropout {d} outside the searched space [0, 0.5]")));
        }
        match self {
            ModelConfig::TemporalCnn(c) => {
                if c.filter_size % 2 == 0 || c.filter_size < 3 {
                    return Err(Error::Config(format!(
                        "filter size {} must be odd and >= 3",
                        c.filter_size
                    )));
                }
                if !(2..=5).contains(&c.nb_conv_layers) {
                    return Err(Error::Config(format!(
                        "conv depth {} outside the studied range 2..=5",
                        c.nb_conv_layers
                    )));
                }
                if c.nb_conv_units == 0 || c.nb_fc_units == 0 {
                    return Err(Error::Config("layer widths must be positive".into()));
                }
            }
            ModelConfig::Rnn(c) => {
                if c.layers == 0 || c.hidden == 0 || c.fc_units == 0 {
                    return Err(Error::Config("recurrent depth and widths must be positive".into()));
                }
            }
            ModelConfig::InceptionTime(c) => {
                if c.modules == 0 || c.filters == 0 {
                    return Err(Error::Config("module count and filters must be positive".into()));
                }
            }
            ModelConfig::Transformer(c) => {
                if c.heads == 0 || c.d_model == 0 || c.d_inner == 0 {
                    return Err(Error::Config("transformer widths must be positive".into()));
                }
                if c.d_model % c.heads != 0 {
                    return Err(Error::Config(format!(
                        "d_model {} not divisible by {} heads",
                        c.d_model, c.heads
                    )));
                }
            }
            ModelConfig::Mcdcnn(_) | ModelConfig::TimeCnn(_) => {}
        }
        Ok(())
    }
}

// ---- architecture bodies ---------------------------------------------------

#[derive(Debug, Clone)]
struct TemporalCnnNet {
    convs: Vec<(Conv1d, BatchNorm1d)>,
    dropout: Dropout,
    fc: Dense,
    fc_bn: BatchNorm1d,
    out: Dense,
    flat_dim: usize,
}

impl TemporalCnnNet {
    fn forward(
        &self,
        tape: &mut Tape,
        params: &mut ParamStore,
        x: NodeId,
        ctx: &mut ForwardCtx,
    ) -> Result<NodeId> {
        let mut h = x;
        for (conv, bn) in &self.convs {
            h = conv.forward(tape, params, h)?;
            h = bn.forward(tape, params, h, ctx.mode)?;
            h = tape.relu(h);
            h = self.dropout.forward(tape, h, ctx)?;
        }
        let b = tape.value(h).shape()[0];
        let flat = tape.reshape(h, &[b, self.flat_dim])?;
        let mut d = self.fc.forward(tape, params, flat)?;
        d = self.fc_bn.forward(tape, params, d, ctx.mode)?;
        d = tape.relu(d);
        d = self.dropout.forward(tape, d, ctx)?;
        let logits = self.out.forward(tape, params, d)?;
        tape.softmax(logits)
    }
}

#[derive(Debug, Clone)]
struct McdcnnBranch {
    conv1: Conv1d,
    conv2: Conv1d,
}

#[derive(Debug, Clone)]
struct McdcnnNet {
    branches: Vec<McdcnnBranch>,
    fc1: Dense,
    fc2: Dense,
    dropout: Dropout,
    fc3: Dense,
    bn: BatchNorm1d,
    out: Dense,
    branch_flat: usize,
}

impl McdcnnNet {
    fn forward(
        &self,
        tape: &mut Tape,
        params: &mut ParamStore,
        x: NodeId,
        ctx: &mut ForwardCtx,
    ) -> Result<NodeId> {
        let b = tape.value(x).shape()[0];
        let mut flats = Vec::with_capacity(self.branches.len());
        for (c, branch) in self.branches.iter().enumerate() {
            let xc = tape.slice_channels(x, c, c + 1)?;
            let mut h = branch.conv1.forward(tape, params, xc)?;
            h = tape.relu(h);
            h = tape.pool1d(h, 2, 2, PoolKind::Max, false)?;
            h = branch.conv2.forward(tape, params, h)?;
            h = tape.relu(h);
            h = tape.pool1d(h, 2, 2, PoolKind::Max, false)?;
            flats.push(tape.reshape(h, &[b, self.branch_flat])?);
        }
        let merged = tape.concat_cols(&flats)?;
        let mut d = self.fc1.forward(tape, params, merged)?;
        d = tape.relu(d);
        d = self.fc2.forward(tape, params, d)?;
        d = tape.relu(d);
        d = self.dropout.forward(tape, d, ctx)?;
        d = self.fc3.forward(tape, params, d)?;
        d = tape.relu(d);
        d = self.bn.forward(tape, params, d, ctx.mode)?;
        let logits = self.out.forward(tape, params, d)?;
        tape.softmax(logits)
    }
}

#[derive(Debug, Clone)]
struct TimeCnnNet {
    conv1: Conv1d,
    conv2: Conv1d,
    dense1: Dense,
    dropout: Dropout,
    dense2: Dense,
    bn: BatchNorm1d,
    dense3: Dense,
    out: Dense,
    flat_dim: usize,
}

impl TimeCnnNet {
    fn forward(
        &self,
        tape: &mut Tape,
        params: &mut ParamStore,
        x: NodeId,
        ctx: &mut ForwardCtx,
    ) -> Result<NodeId> {
        let b = tape.value(x).shape()[0];
        let mut h = self.conv1.forward(tape, params, x)?;
        h = tape.sigmoid(h);
        h = tape.pool1d(h, 3, 3, PoolKind::Avg, false)?;
        h = self.conv2.forward(tape, params, h)?;
        h = tape.sigmoid(h);
        let flat = tape.reshape(h, &[b, self.flat_dim])?;
        let mut d = self.dense1.forward(tape, params, flat)?;
        d = self.dropout.forward(tape, d, ctx)?;
        d = self.dense2.forward(tape, params, d)?;
        d = self.bn.forward(tape, params, d, ctx.mode)?;
        d = self.dense3.forward(tape, params, d)?;
        let logits = self.out.forward(tape, params, d)?;
        Ok(tape.sigmoid(logits))
    }
}

#[derive(Debug, Clone)]
struct RnnNet {
    layers: Vec<GruLayer>,
    dropout: Dropout,
    fc: Dense,
    out: Dense,
    hidden: usize,
}

impl RnnNet {
    fn forward(
        &self,
        tape: &mut Tape,
        params: &mut ParamStore,
        x: NodeId,
        ctx: &mut ForwardCtx,
    ) -> Result<NodeId> {
        let mut h = x;
        for gru in &self.layers {
            h = gru.forward(tape, params, h)?;
        }
        let t = tape.value(h).shape()[1];
        // Sequence summary: forward direction at the last timestep, backward
        // direction at the first.
        let last = tape.slice_time(h, t - 1)?;
        let fwd = tape.slice_cols(last, 0, self.hidden)?;
        let first = tape.slice_time(h, 0)?;
        let bwd = tape.slice_cols(first, self.hidden, 2 * self.hidden)?;
        let mut summary = tape.concat_cols(&[fwd, bwd])?;
        summary = self.dropout.forward(tape, summary, ctx)?;
        let mut d = self.fc.forward(tape, params, summary)?;
        d = tape.relu(d);
        let logits = self.out.forward(tape, params, d)?;
        tape.softmax(logits)
    }
}

#[derive(Debug, Clone)]
struct InceptionModule {
    bottleneck: Conv1d,
    branch_convs: Vec<Conv1d>,
    pool_bottleneck: Conv1d,
    bn: BatchNorm1d,
}

impl InceptionModule {
    fn forward(&self, tape: &mut Tape, params: &mut ParamStore, x: NodeId, mode: Mode) -> Result<NodeId> {
        let squeezed = self.bottleneck.forward(tape, params, x)?;
        let mut branches = Vec::with_capacity(self.branch_convs.len() + 1);
        for conv in &self.branch_convs {
            branches.push(conv.forward(tape, params, squeezed)?);
        }
        let pooled = tape.pool1d(x, 3, 1, PoolKind::Max, true)?;
        branches.push(self.pool_bottleneck.forward(tape, params, pooled)?);
        let cat = tape.concat_channels(&branches)?;
        let normed = self.bn.forward(tape, params, cat, mode)?;
        Ok(tape.relu(normed))
    }
}

#[derive(Debug, Clone)]
struct InceptionShortcut {
    conv: Conv1d,
    bn: BatchNorm1d,
}

#[derive(Debug, Clone)]
struct InceptionNet {
    modules: Vec<InceptionModule>,
    /// Shortcut projections for the residual merge after every third module.
    shortcuts: Vec<InceptionShortcut>,
    dropout: Dropout,
    out: Dense,
}

impl InceptionNet {
    fn forward(
        &self,
        tape: &mut Tape,
        params: &mut ParamStore,
        x: NodeId,
        ctx: &mut ForwardCtx,
    ) -> Result<NodeId> {
        let mut current = x;
        let mut residual_input = x;
        let mut shortcut_iter = self.shortcuts.iter();
        for (i, module) in self.modules.iter().enumerate() {
            let mut y = module.forward(tape, params, current, ctx.mode)?;
            if (i + 1) % 3 == 0 {
                let shortcut = shortcut_iter.next().expect("shortcut per residual point");
                let mut sc = shortcut.conv.forward(tape, params, residual_input)?;
                sc = shortcut.bn.forward(tape, params, sc, ctx.mode)?;
                y = tape.add(y, sc)?;
                y = tape.relu(y);
                residual_input = y;
            }
            y = self.dropout.forward(tape, y, ctx)?;
            current = y;
        }
        let pooled = tape.global_avg_pool_time(current)?;
        let logits = self.out.forward(tape, params, pooled)?;
        tape.softmax(logits)
    }
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    attention: MultiHeadAttention,
    ln_attention: LayerNorm,
    ff1: Dense,
    ff2: Dense,
    ln_ff: LayerNorm,
}

#[derive(Debug, Clone)]
struct TransformerNet {
    embed: Dense,
    encoding: Tensor,
    blocks: Vec<EncoderBlock>,
    dropout: Dropout,
    out: Dense,
}

impl TransformerNet {
    fn forward(
        &self,
        tape: &mut Tape,
        params: &mut ParamStore,
        x: NodeId,
        ctx: &mut ForwardCtx,
    ) -> Result<NodeId> {
        let mut h = self.embed.forward_per_timestep(tape, params, x)?;
        h = tape.add_table(h, &self.encoding)?;
        for block in &self.blocks {
            let attended = block.attention.forward(tape, params, h)?;
            let attended = self.dropout.forward(tape, attended, ctx)?;
            let merged = tape.add(h, attended)?;
            h = block.ln_attention.forward(tape, params, merged)?;

            let mut ff = block.ff1.forward_per_timestep(tape, params, h)?;
            ff = tape.relu(ff);
            ff = block.ff2.forward_per_timestep(tape, params, ff)?;
            ff = self.dropout.forward(tape, ff, ctx)?;
            let merged = tape.add(h, ff)?;
            h = block.ln_ff.forward(tape, params, merged)?;
        }
        let pooled = tape.global_max_pool_time(h)?;
        let logits = self.out.forward(tape, params, pooled)?;
        tape.softmax(logits)
    }
}

#[derive(Debug, Clone)]
enum Arch {
    TemporalCnn(TemporalCnnNet),
    Mcdcnn(McdcnnNet),
    TimeCnn(TimeCnnNet),
    Rnn(RnnNet),
    InceptionTime(InceptionNet),
    Transformer(TransformerNet),
}

/// A built, parameterised network with its registry and input signature.
#[derive(Debug, Clone)]
pub struct Model {
    arch: Arch,
    params: ParamStore,
    config: ModelConfig,
    input_t: usize,
    input_c: usize,
    n_classes: usize,
    seed: u64,
    mode: Mode,
}

impl Model {
    /// Build any variant from its configuration; deterministic in `seed`.
    pub fn build(config: &ModelConfig, t: usize, c: usize, n: usize, seed: u64) -> Result<Model> {
        config.validate()?;
        if t == 0 || c == 0 || n == 0 {
            return Err(Error::Config("input signature dimensions must be positive".into()));
        }
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = match config {
            ModelConfig::TemporalCnn(cfg) => {
                Arch::TemporalCnn(build_temporal_cnn_net(cfg, t, c, n, &mut params, &mut rng)?)
            }
            ModelConfig::Mcdcnn(cfg) => {
                Arch::Mcdcnn(build_mcdcnn_net(cfg, t, c, n, &mut params, &mut rng)?)
            }
            ModelConfig::TimeCnn(cfg) => {
                Arch::TimeCnn(build_time_cnn_net(cfg, t, c, n, &mut params, &mut rng)?)
            }
            ModelConfig::Rnn(cfg) => Arch::Rnn(build_rnn_net(cfg, c, n, &mut params, &mut rng)?),
            ModelConfig::InceptionTime(cfg) => {
                Arch::InceptionTime(build_inception_net(cfg, t, c, n, &mut params, &mut rng)?)
            }
            ModelConfig::Transformer(cfg) => {
                Arch::Transformer(build_transformer_net(cfg, t, c, n, &mut params, &mut rng)?)
            }
        };
        Ok(Model {
            arch,
            params,
            config: config.clone(),
            input_t: t,
            input_c: c,
            n_classes: n,
            seed,
            mode: Mode::Eval,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_signature(&self) -> (usize, usize) {
        (self.input_t, self.input_c)
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn head(&self) -> HeadKind {
        match self.arch {
            Arch::TimeCnn(_) => HeadKind::Sigmoid,
            _ => HeadKind::Softmax,
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Record a forward pass of `input` (already on `tape`) and return the
    /// output node of shape `[batch, N]`.
    pub fn forward(&mut self, tape: &mut Tape, input: NodeId, ctx: &mut ForwardCtx) -> Result<NodeId> {
        let sh = tape.value(input).shape().to_vec();
        if sh.len() != 3 || sh[1] != self.input_t || sh[2] != self.input_c {
            return Err(Error::shape(
                "model input",
                &[sh.first().copied().unwrap_or(0), self.input_t, self.input_c],
                &sh,
            ));
        }
        match &self.arch {
            Arch::TemporalCnn(net) => net.forward(tape, &mut self.params, input, ctx),
            Arch::Mcdcnn(net) => net.forward(tape, &mut self.params, input, ctx),
            Arch::TimeCnn(net) => net.forward(tape, &mut self.params, input, ctx),
            Arch::Rnn(net) => net.forward(tape, &mut self.params, input, ctx),
            Arch::InceptionTime(net) => net.forward(tape, &mut self.params, input, ctx),
            Arch::Transformer(net) => net.forward(tape, &mut self.params, input, ctx),
        }
    }

    /// Run a batch through a fresh tape under the model's current mode.
    pub fn forward_batch(
        &mut self,
        batch: &Tensor,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tape, NodeId)> {
        let mut tape = Tape::new();
        let input = tape.input(batch.clone());
        let mut ctx = ForwardCtx { mode: self.mode, rng };
        let out = self.forward(&mut tape, input, &mut ctx)?;
        Ok((tape, out))
    }

    /// Eval-mode class predictions with lowest-index tie-breaking.
    pub fn predict(&mut self, batch: &Tensor) -> Result<Vec<usize>> {
        let saved = self.mode;
        self.mode = Mode::Eval;
        let result = self.forward_batch(batch, None);
        self.mode = saved;
        let (tape, out) = result?;
        Ok(tape.value(out).argmax_rows())
    }

    /// Total size of trainable parameters; running statistics excluded.
    pub fn count_parameters(&self) -> usize {
        self.params.count_trainable()
    }

    /// True when any batch-norm layer is present (its running statistics
    /// live in the registry as non-trainable parameters).
    pub fn has_batch_norm(&self) -> bool {
        self.params.iter().any(|(_, p)| p.name.ends_with("running_mean"))
    }
}

// ---- builders ------------------------------------------------------------

fn build_temporal_cnn_net(
    cfg: &TemporalCnnConfig,
    t: usize,
    c: usize,
    n: usize,
    params: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<TemporalCnnNet> {
    if t < cfg.filter_size {
        return Err(Error::Config(format!(
            "input length {t} shorter than filter size {}",
            cfg.filter_size
        )));
    }
    let mut convs = Vec::with_capacity(cfg.nb_conv_layers);
    let mut c_in = c;
    for i in 0..cfg.nb_conv_layers {
        let conv = Conv1d::new(
            params,
            rng,
            &format!("conv{i}"),
            cfg.filter_size,
            c_in,
            cfg.nb_conv_units,
            1,
            Padding::Same,
            Init::HeUniform,
        )?;
        let bn = BatchNorm1d::new(params, &format!("conv{i}.bn"), cfg.nb_conv_units);
        convs.push((conv, bn));
        c_in = cfg.nb_conv_units;
    }
    let flat_dim = t * cfg.nb_conv_units;
    let fc = Dense::new(params, rng, "fc", flat_dim, cfg.nb_fc_units, Init::HeUniform);
    let fc_bn = BatchNorm1d::new(params, "fc.bn", cfg.nb_fc_units);
    let out = Dense::new(params, rng, "head", cfg.nb_fc_units, n, Init::GlorotUniform);
    Ok(TemporalCnnNet {
        convs,
        dropout: Dropout::new(cfg.dropout)?,
        fc,
        fc_bn,
        out,
        flat_dim,
    })
}

fn build_mcdcnn_net(
    cfg: &McdcnnConfig,
    t: usize,
    c: usize,
    n: usize,
    params: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<McdcnnNet> {
    let stage = |len: usize| -> Result<usize> {
        if len < 5 {
            return Err(Error::Config(format!(
                "input length {t} too short for two conv+pool stages"
            )));
        }
        let after_conv = len - 4;
        if after_conv < 2 {
            return Err(Error::Config(format!(
                "input length {t} too short for two conv+pool stages"
            )));
        }
        Ok((after_conv - 2) / 2 + 1)
    };
    let t1 = stage(t)?;
    let t2 = stage(t1)?;
    let branch_flat = t2 * 8;

    let mut branches = Vec::with_capacity(c);
    for ci in 0..c {
        let conv1 = Conv1d::new(
            params,
            rng,
            &format!("branch{ci}.conv1"),
            5,
            1,
            8,
            1,
            Padding::Valid,
            Init::HeUniform,
        )?;
        let conv2 = Conv1d::new(
            params,
            rng,
            &format!("branch{ci}.conv2"),
            5,
            8,
            8,
            1,
            Padding::Valid,
            Init::HeUniform,
        )?;
        branches.push(McdcnnBranch { conv1, conv2 });
    }
    let fc1 = Dense::new(params, rng, "fc1", branch_flat * c, 732, Init::HeUniform);
    let fc2 = Dense::new(params, rng, "fc2", 732, 256, Init::HeUniform);
    let fc3 = Dense::new(params, rng, "fc3", 256, 128, Init::HeUniform);
    let bn = BatchNorm1d::new(params, "fc3.bn", 128);
    let out = Dense::new(params, rng, "head", 128, n, Init::GlorotUniform);
    Ok(McdcnnNet {
        branches,
        fc1,
        fc2,
        dropout: Dropout::new(cfg.dropout)?,
        fc3,
        bn,
        out,
        branch_flat,
    })
}

fn build_time_cnn_net(
    cfg: &TimeCnnConfig,
    t: usize,
    c: usize,
    n: usize,
    params: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<TimeCnnNet> {
    if t < 5 {
        return Err(Error::Config(format!("input length {t} too short, need at least 5")));
    }
    let conv1 = Conv1d::new(params, rng, "conv1", 5, c, 6, 1, Padding::Same, Init::GlorotUniform)?;
    let pooled = (t - 3) / 3 + 1;
    let conv2 = Conv1d::new(params, rng, "conv2", 5, 6, 12, 1, Padding::Same, Init::GlorotUniform)?;
    let flat_dim = pooled * 12;
    let dense1 = Dense::new(params, rng, "dense1", flat_dim, 128, Init::GlorotUniform);
    let dense2 = Dense::new(params, rng, "dense2", 128, 64, Init::GlorotUniform);
    let bn = BatchNorm1d::new(params, "dense2.bn", 64);
    let dense3 = Dense::new(params, rng, "dense3", 64, 32, Init::GlorotUniform);
    let out = Dense::new(params, rng, "head", 32, n, Init::GlorotUniform);
    Ok(TimeCnnNet {
        conv1,
        conv2,
        dense1,
        dropout: Dropout::new(cfg.dropout)?,
        dense2,
        bn,
        dense3,
        out,
        flat_dim,
    })
}

fn build_rnn_net(
    cfg: &RnnConfig,
    c: usize,
    n: usize,
    params: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<RnnNet> {
    let mut layers = Vec::with_capacity(cfg.layers);
    let mut in_dim = c;
    for i in 0..cfg.layers {
        let gru = GruLayer::new(
            params,
            rng,
            &format!("gru{i}"),
            in_dim,
            cfg.hidden,
            Direction::Bidirectional,
        );
        in_dim = gru.out_width();
        layers.push(gru);
    }
    let fc = Dense::new(params, rng, "fc", 2 * cfg.hidden, cfg.fc_units, Init::HeUniform);
    let out = Dense::new(params, rng, "head", cfg.fc_units, n, Init::GlorotUniform);
    Ok(RnnNet {
        layers,
        dropout: Dropout::new(cfg.dropout)?,
        fc,
        out,
        hidden: cfg.hidden,
    })
}

/// Branch kernels are 10, 20 and 40 timestamps, capped at the series length
/// and decremented to odd so the same-padded convolution is centred.
fn inception_kernel_sizes(t: usize) -> [usize; 3] {
    let adjust = |k: usize| {
        let mut k = k.min(t);
        if k % 2 == 0 {
            k -= 1;
        }
        k.max(1)
    };
    [adjust(10), adjust(20), adjust(40)]
}

const INCEPTION_BOTTLENECK: usize = 32;

fn build_inception_net(
    cfg: &InceptionTimeConfig,
    t: usize,
    c: usize,
    n: usize,
    params: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<InceptionNet> {
    let kernels = inception_kernel_sizes(t);
    let out_channels = 3 * cfg.filters + INCEPTION_BOTTLENECK;
    let mut modules = Vec::with_capacity(cfg.modules);
    let mut shortcuts = Vec::new();
    let mut c_in = c;
    let mut residual_c = c;
    for i in 0..cfg.modules {
        let bottleneck = Conv1d::new(
            params,
            rng,
            &format!("module{i}.bottleneck"),
            1,
            c_in,
            INCEPTION_BOTTLENECK,
            1,
            Padding::Same,
            Init::HeUniform,
        )?;
        let mut branch_convs = Vec::with_capacity(3);
        for (bi, &k) in kernels.iter().enumerate() {
            branch_convs.push(Conv1d::new(
                params,
                rng,
                &format!("module{i}.branch{bi}"),
                k,
                INCEPTION_BOTTLENECK,
                cfg.filters,
                1,
                Padding::Same,
                Init::HeUniform,
            )?);
        }
        let pool_bottleneck = Conv1d::new(
            params,
            rng,
            &format!("module{i}.pool_bottleneck"),
            1,
            c_in,
            INCEPTION_BOTTLENECK,
            1,
            Padding::Same,
            Init::HeUniform,
        )?;
        let bn = BatchNorm1d::new(params, &format!("module{i}.bn"), out_channels);
        modules.push(InceptionModule {
            bottleneck,
            branch_convs,
            pool_bottleneck,
            bn,
        });
        if (i + 1) % 3 == 0 {
            let conv = Conv1d::new(
                params,
                rng,
                &format!("shortcut{}", shortcuts.len()),
                1,
                residual_c,
                out_channels,
                1,
                Padding::Same,
                Init::HeUniform,
            )?;
            let bn = BatchNorm1d::new(params, &format!("shortcut{}.bn", shortcuts.len()), out_channels);
            shortcuts.push(InceptionShortcut { conv, bn });
            residual_c = out_channels;
        }
        c_in = out_channels;
    }
    let out = Dense::new(params, rng, "head", out_channels, n, Init::GlorotUniform);
    Ok(InceptionNet {
        modules,
        shortcuts,
        dropout: Dropout::new(cfg.dropout)?,
        out,
    })
}

fn build_transformer_net(
    cfg: &TransformerConfig,
    t: usize,
    c: usize,
    n: usize,
    params: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<TransformerNet> {
    let embed = Dense::new(params, rng, "embed", c, cfg.d_model, Init::GlorotUniform);
    let encoding = positional_encoding(t, cfg.d_model);
    let mut blocks = Vec::with_capacity(cfg.encoder_layers);
    for i in 0..cfg.encoder_layers {
        let attention = MultiHeadAttention::new(
            params,
            rng,
            &format!("block{i}.attn"),
            cfg.d_model,
            cfg.heads,
        )?;
        let ln_attention = LayerNorm::new(params, &format!("block{i}.ln1"), cfg.d_model);
        let ff1 = Dense::new(params, rng, &format!("block{i}.ff1"), cfg.d_model, cfg.d_inner, Init::HeUniform);
        let ff2 = Dense::new(params, rng, &format!("block{i}.ff2"), cfg.d_inner, cfg.d_model, Init::GlorotUniform);
        let ln_ff = LayerNorm::new(params, &format!("block{i}.ln2"), cfg.d_model);
        blocks.push(EncoderBlock {
            attention,
            ln_attention,
            ff1,
            ff2,
            ln_ff,
        });
    }
    let out = Dense::new(params, rng, "head", cfg.d_model, n, Init::GlorotUniform);
    Ok(TransformerNet {
        embed,
        encoding,
        blocks,
        dropout: Dropout::new(cfg.dropout)?,
        out,
    })
}

// ---- free builder functions ------------------------------------------------

pub fn build_temporal_cnn(cfg: &TemporalCnnConfig, t: usize, c: usize, n: usize, seed: u64) -> Result<Model> {
    Model::build(&ModelConfig::TemporalCnn(cfg.clone()), t, c, n, seed)
}

pub fn build_mcdcnn(cfg: &McdcnnConfig, t: usize, c: usize, n: usize, seed: u64) -> Result<Model> {
    Model::build(&ModelConfig::Mcdcnn(cfg.clone()), t, c, n, seed)
}

pub fn build_time_cnn(cfg: &TimeCnnConfig, t: usize, c: usize, n: usize, seed: u64) -> Result<Model> {
    Model::build(&ModelConfig::TimeCnn(cfg.clone()), t, c, n, seed)
}

pub fn build_rnn(cfg: &RnnConfig, t: usize, c: usize, n: usize, seed: u64) -> Result<Model> {
    Model::build(&ModelConfig::Rnn(cfg.clone()), t, c, n, seed)
}

pub fn build_inception_time(cfg: &InceptionTimeConfig, t: usize, c: usize, n: usize, seed: u64) -> Result<Model> {
    Model::build(&ModelConfig::InceptionTime(cfg.clone()), t, c, n, seed)
}

pub fn build_transformer(cfg: &TransformerConfig, t: usize, c: usize, n: usize, seed: u64) -> Result<Model> {
    Model::build(&ModelConfig::Transformer(cfg.clone()), t, c, n, seed)
}

/// Trainable parameter count of a built model.
pub fn count_parameters(model: &Model) -> usize {
    model.count_parameters()
}
