//! Loss functions, optimizers and the epoch loop.
//!
//! Training is fully deterministic given `(config, seed, data)`: one seeded
//! RNG drives the per-epoch shuffle and every dropout mask in sequence, and
//! all arithmetic is 64-bit on a single thread.

use std::fmt;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{one_hot, SitsDataset};
use crate::error::{Error, Result};
use crate::models::{HeadKind, Model};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::UnknownName {
                name: other.into(),
                known: "adam, sgd".into(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Mse => "mse",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "cross_entropy" => Ok(LossKind::CrossEntropy),
            "mse" => Ok(LossKind::Mse),
            other => Err(Error::UnknownName {
                name: other.into(),
                known: "cross_entropy, mse".into(),
            }),
        }
    }
}

/// Stop once validation loss has not improved for `patience` epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStoppingConfig {
    pub patience: usize,
    pub restore_best: bool,
}

impl Default for EarlyStoppingConfig {
    fn default() -> Self {
        EarlyStoppingConfig {
            patience: 10,
            restore_best: true,
        }
    }
}

/// Halve the learning rate when training loss plateaus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience_epochs: usize,
    pub min_lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stopping: Option<EarlyStoppingConfig>,
    pub lr_plateau: Option<PlateauConfig>,
    pub loss: LossKind,
    pub seed: u64,
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size and epoch budget must be positive".into()));
        }
        if let Some(p) = &self.lr_plateau {
            if !(0.0 < p.factor && p.factor < 1.0) || p.patience_epochs == 0 || p.min_lr <= 0.0 {
                return Err(Error::Config("invalid plateau schedule".into()));
            }
        }
        Ok(())
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            batch_size: 128,
            max_epochs: 100,
            early_stopping: Some(EarlyStoppingConfig::default()),
            lr_plateau: None,
            loss: LossKind::CrossEntropy,
            seed: 0,
        }
    }
}

// ---- losses (value forms) -----------------------------------------------------

/// Mean over the batch of `-log p(true class)`; probabilities are clipped to
/// `[1e-12, 1]` before the log.
pub fn cross_entropy_loss(probs: &Tensor, onehot: &Tensor) -> Result<f64> {
    if probs.shape() != onehot.shape() || probs.rank() != 2 {
        return Err(Error::shape("cross_entropy_loss", onehot.shape(), probs.shape()));
    }
    let batch = probs.shape()[0] as f64;
    let mut total = 0.0;
    for (p, y) in probs.data().iter().zip(onehot.data()) {
        if *y != 0.0 {
            total -= y * p.clamp(1e-12, 1.0).ln();
        }
    }
    Ok(total / batch)
}

/// Mean of squared differences over all entries.
pub fn mse_loss(preds: &Tensor, onehot: &Tensor) -> Result<f64> {
    if preds.shape() != onehot.shape() {
        return Err(Error::shape("mse_loss", onehot.shape(), preds.shape()));
    }
    let total: f64 = preds
        .data()
        .iter()
        .zip(onehot.data())
        .map(|(p, y)| (p - y) * (p - y))
        .sum();
    Ok(total / preds.numel() as f64)
}

// ---- optimizers ------------------------------------------------------------------

/// First/second moment state for bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .trainable_ids()
            .iter()
            .map(|&id| Tensor::zeros(params.value(id).shape()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. Weight decay enters as L2 added to the
/// gradient before the moment updates.
pub fn adam_step(
    params: &mut ParamStore,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);
    for (slot, id) in params.trainable_ids().into_iter().enumerate() {
        let grad: Vec<f64> = params.gradient(id).data().to_vec();
        let m = state.m[slot].data_mut();
        let v = state.v[slot].data_mut();
        let value = params.value_mut(id).data_mut();
        for i in 0..value.len() {
            let g = grad[i] + weight_decay * value[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            value[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}

/// Momentum buffers for SGD (unused while momentum is zero).
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(params: &ParamStore) -> Self {
        SgdState {
            velocity: params
                .trainable_ids()
                .iter()
                .map(|&id| Tensor::zeros(params.value(id).shape()))
                .collect(),
        }
    }
}

/// `p <- p - lr * (g + weight_decay * p)`, with optional classical momentum.
pub fn sgd_step(
    params: &mut ParamStore,
    state: &mut SgdState,
    lr: f64,
    weight_decay: f64,
    momentum: f64,
) {
    for (slot, id) in params.trainable_ids().into_iter().enumerate() {
        let grad: Vec<f64> = params.gradient(id).data().to_vec();
        let vel = state.velocity[slot].data_mut();
        let value = params.value_mut(id).data_mut();
        for i in 0..value.len() {
            let g = grad[i] + weight_decay * value[i];
            if momentum > 0.0 {
                vel[i] = momentum * vel[i] + g;
                value[i] -= lr * vel[i];
            } else {
                value[i] -= lr * g;
            }
        }
    }
}

enum OptimizerState {
    Adam(AdamState),
    Sgd(SgdState),
}

// ---- logging ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
    /// Wall-clock of the epoch's training phase (validation excluded).
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    EarlyStopping,
    MaxEpochs,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StopReason::EarlyStopping => write!(f, "early_stopping"),
            StopReason::MaxEpochs => write!(f, "max_epochs"),
        }
    }
}

/// Per-epoch history of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch attaining the minimum validation loss.
    pub best_epoch: usize,
    pub stopped_reason: StopReason,
    /// Full loop wall-clock, training and validation included.
    pub total_time: f64,
}

impl TrainLog {
    pub fn best_val_loss(&self) -> f64 {
        self.epochs[self.best_epoch - 1].val_loss
    }

    /// Mean per-epoch training time in seconds.
    pub fn mean_epoch_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.seconds).sum::<f64>() / self.epochs.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc,lr,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:e},{:.3}",
                e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc, e.lr, e.seconds
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "epoch {:>4}: train_loss={:.6} train_acc={:.4} val_loss={:.6} val_acc={:.4} lr={:e} ({:.3}s)",
                e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc, e.lr, e.seconds
            );
        }
        let _ = writeln!(
            out,
            "stopped: {} after {} epochs, best epoch {} (val_loss {:.6}), total {:.3}s",
            self.stopped_reason,
            self.epochs.len(),
            self.best_epoch,
            self.best_val_loss(),
            self.total_time
        );
        out
    }
}

// ---- early stopping policy ---------------------------------------------------------

/// Validation-loss monitor: strict improvement resets the counter; stop
/// after `patience` consecutive non-improving epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best_loss: f64,
    pub best_epoch: usize,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Observe one epoch's validation loss; returns true when training
    /// should stop. `epoch` is 1-based. Ties do not count as improvement.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            false
        } else {
            self.since_best += 1;
            self.since_best >= self.patience
        }
    }

    pub fn improved_at(&self, epoch: usize) -> bool {
        self.best_epoch == epoch
    }
}

// ---- the epoch loop ---------------------------------------------------------------

fn check_compatible(model: &Model, ds: &SitsDataset, what: &str) -> Result<()> {
    let (t, c) = model.input_signature();
    if ds.timesteps() != t || ds.channels() != c {
        return Err(Error::shape(
            &format!("{what} dataset vs model signature"),
            &[t, c],
            &[ds.timesteps(), ds.channels()],
        ));
    }
    if ds.n_classes() != model.n_classes() {
        return Err(Error::Config(format!(
            "{what} dataset has {} classes, model expects {}",
            ds.n_classes(),
            model.n_classes()
        )));
    }
    Ok(())
}

/// Eval-mode loss and accuracy over a dataset, batched.
pub fn evaluate_loss_acc(
    model: &mut Model,
    ds: &SitsDataset,
    batch_size: usize,
    loss: LossKind,
) -> Result<(f64, f64)> {
    let saved = model.mode();
    model.set_mode(crate::tape::Mode::Eval);
    let k = model.n_classes();
    let indices: Vec<usize> = (0..ds.n()).collect();
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size) {
        let batch = ds.batch(chunk);
        let labels = ds.batch_labels(chunk);
        let (tape, out) = model.forward_batch(&batch, None)?;
        let probs = tape.value(out);
        let targets = one_hot(&labels, k)?;
        let batch_loss = match loss {
            LossKind::CrossEntropy => cross_entropy_loss(probs, &targets)?,
            LossKind::Mse => mse_loss(probs, &targets)?,
        };
        total_loss += batch_loss * chunk.len() as f64;
        for (pred, &label) in probs.argmax_rows().iter().zip(&labels) {
            if *pred == label {
                correct += 1;
            }
        }
    }
    model.set_mode(saved);
    Ok((total_loss / ds.n() as f64, correct as f64 / ds.n() as f64))
}

/// Train `model` on `train_ds`, monitoring `val_ds` each epoch.
pub fn train(
    model: &mut Model,
    train_ds: &SitsDataset,
    val_ds: &SitsDataset,
    cfg: &TrainingConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    check_compatible(model, train_ds, "train")?;
    check_compatible(model, val_ds, "validation")?;
    match (model.head(), cfg.loss) {
        (HeadKind::Softmax, LossKind::CrossEntropy) | (HeadKind::Sigmoid, LossKind::Mse) => {}
        (head, loss) => {
            return Err(Error::Config(format!(
                "loss {} incompatible with {head:?} head",
                loss.name()
            )))
        }
    }
    if model.has_batch_norm() && cfg.batch_size < 2 {
        return Err(Error::Config(
            "batch size must be >= 2 when batch normalisation trains".into(),
        ));
    }

    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = model.n_classes();
    let n = train_ds.n();
    let mut indices: Vec<usize> = (0..n).collect();

    let mut opt_state = match cfg.optimizer {
        OptimizerKind::Adam => OptimizerState::Adam(AdamState::new(model.params())),
        OptimizerKind::Sgd => OptimizerState::Sgd(SgdState::new(model.params())),
    };
    let mut lr = cfg.learning_rate;

    let mut stopper = cfg.early_stopping.map(|es| (EarlyStopper::new(es.patience), es));
    let mut best_snapshot: Option<Vec<Tensor>> = None;
    let mut plateau_best = f64::INFINITY;
    let mut plateau_since = 0usize;

    let mut epochs = Vec::new();
    let mut stopped_reason = StopReason::MaxEpochs;
    let mut best_epoch_fallback = 0usize;
    let mut best_val_fallback = f64::INFINITY;

    for epoch in 1..=cfg.max_epochs {
        let epoch_start = Instant::now();
        indices.shuffle(&mut rng);
        model.set_mode(crate::tape::Mode::Train);

        let mut running_loss = 0.0;
        let mut seen = 0usize;
        let mut correct = 0usize;
        for (batch_no, chunk) in indices.chunks(cfg.batch_size).enumerate() {
            if chunk.len() == 1 && model.has_batch_norm() {
                // A lone trailing sample cannot provide batch statistics.
                continue;
            }
            let batch = train_ds.batch(chunk);
            let labels = train_ds.batch_labels(chunk);
            let targets = one_hot(&labels, k)?;

            let (mut tape, out) = model.forward_batch(&batch, Some(&mut rng))?;
            let loss_node = match cfg.loss {
                LossKind::CrossEntropy => tape.cross_entropy(out, &targets)?,
                LossKind::Mse => tape.mse(out, &targets)?,
            };
            let loss_value = tape.value(loss_node).item();
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no + 1,
                    value: loss_value,
                });
            }

            model.params_mut().zero_gradients();
            {
                // Split borrows: the tape writes gradients into the registry.
                let (tape_ref, params) = (&mut tape, model.params_mut());
                tape_ref.backward(loss_node, params)?;
            }
            match &mut opt_state {
                OptimizerState::Adam(state) => {
                    adam_step(model.params_mut(), state, lr, cfg.weight_decay, 0.9, 0.999, 1e-8)
                }
                OptimizerState::Sgd(state) => {
                    sgd_step(model.params_mut(), state, lr, cfg.weight_decay, 0.0)
                }
            }

            running_loss += loss_value * chunk.len() as f64;
            seen += chunk.len();
            for (pred, &label) in tape.value(out).argmax_rows().iter().zip(&labels) {
                if *pred == label {
                    correct += 1;
                }
            }
        }
        let train_seconds = epoch_start.elapsed().as_secs_f64();
        let train_loss = running_loss / seen.max(1) as f64;
        let train_acc = correct as f64 / seen.max(1) as f64;

        let (val_loss, val_acc) = evaluate_loss_acc(model, val_ds, cfg.batch_size, cfg.loss)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
            lr,
            seconds: train_seconds,
        });

        if val_loss < best_val_fallback {
            best_val_fallback = val_loss;
            best_epoch_fallback = epoch;
        }

        let mut stop = false;
        if let Some((stopper, es_cfg)) = &mut stopper {
            stop = stopper.observe(epoch, val_loss);
            if stopper.improved_at(epoch) && es_cfg.restore_best {
                best_snapshot = Some(model.params().snapshot_values());
            }
        }

        if let Some(plateau) = &cfg.lr_plateau {
            if train_loss < plateau_best {
                plateau_best = train_loss;
                plateau_since = 0;
            } else {
                plateau_since += 1;
                if plateau_since >= plateau.patience_epochs {
                    lr = (lr * plateau.factor).max(plateau.min_lr);
                    plateau_since = 0;
                }
            }
        }

        if stop {
            stopped_reason = StopReason::EarlyStopping;
            break;
        }
    }

    if let Some(snapshot) = &best_snapshot {
        model.params_mut().restore_values(snapshot);
    }
    model.set_mode(crate::tape::Mode::Eval);

    let best_epoch = stopper
        .as_ref()
        .map(|(s, _)| s.best_epoch)
        .filter(|&e| e > 0)
        .unwrap_or(best_epoch_fallback);
    Ok(TrainLog {
        epochs,
        best_epoch,
        stopped_reason,
        total_time: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};
    use crate::models::{Model, ModelConfig, TemporalCnnConfig, TimeCnnConfig};

    fn scalar_param_store(value: f64) -> ParamStore {
        let mut params = ParamStore::new();
        params.add("p", Tensor::scalar(value), true);
        params
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut params = scalar_param_store(1.0);
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &mut state, 0.001, 0.0, 0.9, 0.999, 1e-8);
        assert_eq!(params.value(crate::params::ParamId(0)).item(), 1.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = scalar_param_store(1.0);
        let id = crate::params::ParamId(0);
        params.accumulate_gradient(id, &Tensor::scalar(1.0)).unwrap();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &mut state, 0.001, 0.0, 0.9, 0.999, 1e-8);
        assert!((params.value(id).item() - 0.999).abs() < 1e-9);
    }

    #[test]
    fn sgd_examples() {
        let mut params = scalar_param_store(1.0);
        let id = crate::params::ParamId(0);
        let mut state = SgdState::new(&params);
        sgd_step(&mut params, &mut state, 0.01, 0.0, 0.0);
        assert_eq!(params.value(id).item(), 1.0);

        sgd_step(&mut params, &mut state, 0.01, 0.0005, 0.0);
        assert!((params.value(id).item() - 0.999995).abs() < 1e-12);
    }

    #[test]
    fn adam_and_sgd_agree_on_descent_direction() {
        // f(p) = (p - 3)^2 at p = 0: gradient is -6, both must increase p.
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let mut params = scalar_param_store(0.0);
            let id = crate::params::ParamId(0);
            params.accumulate_gradient(id, &Tensor::scalar(-6.0)).unwrap();
            match kind {
                OptimizerKind::Adam => {
                    let mut s = AdamState::new(&params);
                    adam_step(&mut params, &mut s, 0.01, 0.0, 0.9, 0.999, 1e-8);
                }
                OptimizerKind::Sgd => {
                    let mut s = SgdState::new(&params);
                    sgd_step(&mut params, &mut s, 0.01, 0.0, 0.0);
                }
            }
            assert!(params.value(id).item() > 0.0, "{kind:?} moved the wrong way");
        }
    }

    #[test]
    fn loss_value_closed_forms() {
        let probs = Tensor::from_vec(vec![1, 9], vec![1.0 / 9.0; 9]).unwrap();
        let onehot = one_hot(&[4], 9).unwrap();
        assert!((cross_entropy_loss(&probs, &onehot).unwrap() - 9.0_f64.ln()).abs() < 1e-12);

        let perfect = one_hot(&[2], 9).unwrap();
        assert!(cross_entropy_loss(&perfect, &perfect).unwrap().abs() < 1e-12);

        let zeros = Tensor::zeros(&[3, 4]);
        let targets = one_hot(&[0, 1, 2], 4).unwrap();
        assert!((mse_loss(&zeros, &targets).unwrap() - 0.25).abs() < 1e-12);
        assert!(mse_loss(&targets, &targets).unwrap().abs() < 1e-12);
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_probs_minus_targets() {
        use crate::tape::Tape;
        let logits = Tensor::from_vec(vec![2, 3], vec![0.3, -1.2, 0.9, 2.0, 0.1, -0.4]).unwrap();
        let targets = one_hot(&[2, 0], 3).unwrap();
        let mut params = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.input(logits);
        let probs = tape.softmax(x).unwrap();
        let loss = tape.cross_entropy(probs, &targets).unwrap();
        tape.backward(loss, &mut params).unwrap();
        let grad = tape.grad(x).unwrap();
        let p = tape.value(probs);
        for i in 0..6 {
            let expect = (p.data()[i] - targets.data()[i]) / 2.0;
            assert!((grad.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn early_stopper_policy_definition() {
        let mut stopper = EarlyStopper::new(10);
        let mut stopped_at = None;
        for epoch in 1..=50 {
            // Strictly increasing validation loss from the start.
            if stopper.observe(epoch, epoch as f64) {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(11));
        assert_eq!(stopper.best_epoch, 1);
    }

    fn tiny_dataset(n: usize, seed: u64) -> SitsDataset {
        synth_generate(&SynthSpec::seasonal(3, 12, 4, n, 0.05, seed)).unwrap()
    }

    fn tiny_tcnn(seed: u64) -> Model {
        let cfg = ModelConfig::TemporalCnn(TemporalCnnConfig {
            nb_conv_layers: 2,
            nb_conv_units: 8,
            nb_fc_units: 16,
            filter_size: 3,
            dropout: 0.1,
        });
        Model::build(&cfg, 12, 4, 3, seed).unwrap()
    }

    #[test]
    fn memorizes_a_tiny_dataset() {
        let ds = tiny_dataset(30, 1);
        let mut model = tiny_tcnn(2);
        let cfg = TrainingConfig {
            batch_size: 10,
            max_epochs: 60,
            early_stopping: None,
            seed: 3,
            ..TrainingConfig::default()
        };
        let log = train(&mut model, &ds, &ds, &cfg).unwrap();
        let last = log.epochs.last().unwrap();
        assert!(last.train_acc > 0.95, "train accuracy {}", last.train_acc);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let ds = tiny_dataset(24, 5);
        let cfg = TrainingConfig {
            batch_size: 8,
            max_epochs: 4,
            early_stopping: None,
            seed: 9,
            ..TrainingConfig::default()
        };
        let mut a = tiny_tcnn(7);
        let log_a = train(&mut a, &ds, &ds, &cfg).unwrap();
        let mut b = tiny_tcnn(7);
        let log_b = train(&mut b, &ds, &ds, &cfg).unwrap();
        for (ra, rb) in log_a.epochs.iter().zip(&log_b.epochs) {
            assert_eq!(ra.train_loss.to_bits(), rb.train_loss.to_bits());
            assert_eq!(ra.val_loss.to_bits(), rb.val_loss.to_bits());
        }
        for ((_, pa), (_, pb)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(pa.value.data(), pb.value.data());
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_location() {
        let ds = tiny_dataset(24, 6);
        let mut model = tiny_tcnn(8);
        let cfg = TrainingConfig {
            learning_rate: 1e300,
            batch_size: 8,
            max_epochs: 5,
            early_stopping: None,
            seed: 1,
            ..TrainingConfig::default()
        };
        match train(&mut model, &ds, &ds, &cfg) {
            Err(Error::NonFiniteLoss { epoch, batch, .. }) => {
                assert!(epoch >= 1 && batch >= 1);
            }
            other => panic!("expected non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn incompatible_loss_head_pairs_are_rejected() {
        let ds = tiny_dataset(16, 2);
        let mut softmax_model = tiny_tcnn(1);
        let mse_cfg = TrainingConfig {
            loss: LossKind::Mse,
            ..TrainingConfig::default()
        };
        assert!(matches!(
            train(&mut softmax_model, &ds, &ds, &mse_cfg),
            Err(Error::Config(_))
        ));

        let mut sigmoid_model =
            Model::build(&ModelConfig::TimeCnn(TimeCnnConfig { dropout: 0.1 }), 12, 4, 3, 0).unwrap();
        let ce_cfg = TrainingConfig::default();
        assert!(matches!(
            train(&mut sigmoid_model, &ds, &ds, &ce_cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn trailing_singleton_batch_is_dropped_under_batch_norm() {
        let ds = tiny_dataset(17, 3);
        let mut model = tiny_tcnn(4);
        let cfg = TrainingConfig {
            batch_size: 8, // 8 + 8 + 1: the final sample is skipped
            max_epochs: 2,
            early_stopping: None,
            seed: 2,
            ..TrainingConfig::default()
        };
        assert!(train(&mut model, &ds, &ds, &cfg).is_ok());

        let singleton = TrainingConfig { batch_size: 1, ..cfg };
        let mut model2 = tiny_tcnn(4);
        assert!(matches!(
            train(&mut model2, &ds, &ds, &singleton),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn restore_best_recovers_logged_val_loss() {
        let ds = tiny_dataset(30, 4);
        let split = crate::data::SplitSpec::new(0.7, 0.3, 1, false).unwrap();
        let (train_ds, val_ds, _) = crate::data::split(&ds, &split).unwrap();
        let mut model = tiny_tcnn(5);
        let cfg = TrainingConfig {
            batch_size: 8,
            max_epochs: 25,
            early_stopping: Some(EarlyStoppingConfig {
                patience: 5,
                restore_best: true,
            }),
            seed: 11,
            ..TrainingConfig::default()
        };
        let log = train(&mut model, &train_ds, &val_ds, &cfg).unwrap();
        let (post_loss, _) = evaluate_loss_acc(&mut model, &val_ds, 8, LossKind::CrossEntropy).unwrap();
        assert!(
            (post_loss - log.best_val_loss()).abs() < 1e-9,
            "restored {post_loss} vs logged {}",
            log.best_val_loss()
        );
        assert_eq!(
            log.best_epoch,
            log.epochs
                .iter()
                .min_by(|a, b| a.val_loss.partial_cmp(&b.val_loss).unwrap())
                .unwrap()
                .epoch
        );
    }

    #[test]
    fn log_serialisation_round() {
        let log = TrainLog {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 1.5,
                train_acc: 0.5,
                val_loss: 1.2,
                val_acc: 0.6,
                lr: 1e-3,
                seconds: 0.25,
            }],
            best_epoch: 1,
            stopped_reason: StopReason::MaxEpochs,
            total_time: 0.3,
        };
        let csv = log.to_csv();
        assert!(csv.starts_with("epoch,train_loss,train_acc,val_loss,val_acc,lr,seconds\n"));
        assert!(csv.lines().count() == 2);
        assert!(log.to_text().contains("best epoch 1"));
    }
}
