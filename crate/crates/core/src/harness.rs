//! Experiment orchestration: single runs, grid searches, timing runs,
//! result tables and reproduction manifests.
//!
//! Trials are independent: each owns its model and RNG, datasets are shared
//! read-only, and rows land at fixed positions in the results table, so the
//! table is identical no matter how trials are scheduled across workers.
//! Completed trials are recorded in `manifest.txt` (keyed by config hash and
//! seed) and skipped on rerun.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use crate::config::{
    model_config_from_kv, model_config_to_kv, training_config_from_kv, training_config_to_kv,
    KvConfig,
};
use crate::data::{
    apply_normalizer, fit_normalizer, load_dataset, load_sits_tsi, load_tiselac, split,
    synth_generate, SitsDataset, SplitSpec, SynthSpec,
};
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::models::{
    InceptionTimeConfig, McdcnnConfig, Model, ModelConfig, RnnConfig, TemporalCnnConfig,
    TimeCnnConfig, TransformerConfig,
};
use crate::presets::{lookup, DatasetTag};
use crate::training::{train, EarlyStoppingConfig, LossKind, TrainingConfig};

/// Where the experiment's data comes from.
#[derive(Debug, Clone)]
pub enum DatasetSource {
    Tiselac {
        features: PathBuf,
        labels: PathBuf,
        test_features: Option<PathBuf>,
        test_labels: Option<PathBuf>,
    },
    SitsTsi {
        fold: PathBuf,
    },
    /// A dataset file in the flat layout with sidecar metadata.
    File {
        path: PathBuf,
    },
    /// Generated in memory.
    Synthetic {
        spec: SynthSpec,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentMode {
    Single,
    Grid,
    /// Fixed protocol: batch 128, 20 epochs, no early stopping.
    Timing,
}

/// One experiment: a dataset, a split policy, and the trial grids.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub name: String,
    pub dataset: DatasetSource,
    pub split: SplitSpec,
    pub model_grid: Vec<ModelConfig>,
    pub training_grid: Vec<TrainingConfig>,
    /// Zip the two grids instead of taking their product; used by the
    /// comparison studies where each architecture carries its own recipe.
    pub paired: bool,
    pub seeds: Vec<u64>,
    pub mode: ExperimentMode,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.model_grid.is_empty() || self.training_grid.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("experiment grids and seeds must be non-empty".into()));
        }
        if self.paired && self.model_grid.len() != self.training_grid.len() {
            return Err(Error::Config(
                "paired experiments need equally long model and training grids".into(),
            ));
        }
        for m in &self.model_grid {
            m.validate()?;
        }
        for t in &self.training_grid {
            t.validate()?;
        }
        Ok(())
    }

    fn trials(&self) -> Vec<(ModelConfig, TrainingConfig, u64)> {
        let mut out = Vec::new();
        if self.paired {
            for (m, t) in self.model_grid.iter().zip(&self.training_grid) {
                for &seed in &self.seeds {
                    out.push((m.clone(), t.clone(), seed));
                }
            }
        } else {
            for m in &self.model_grid {
                for t in &self.training_grid {
                    for &seed in &self.seeds {
                        out.push((m.clone(), t.clone(), seed));
                    }
                }
            }
        }
        out
    }
}

// ---- results table --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TrialMetrics {
    pub oa: f64,
    pub f1: f64,
    pub train_seconds: f64,
    /// Mean wall-clock of one training epoch.
    pub epoch_seconds: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrialOutcome {
    Ok(TrialMetrics),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRow {
    /// Semicolon-separated config echo (never contains commas).
    pub config_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub outcome: TrialOutcome,
}

impl TrialRow {
    pub fn metrics(&self) -> Option<&TrialMetrics> {
        match &self.outcome {
            TrialOutcome::Ok(m) => Some(m),
            TrialOutcome::Failed(_) => None,
        }
    }
}

/// Rows of one experiment in trial order, with a best-row marker.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultsTable {
    pub rows: Vec<TrialRow>,
}

impl ResultsTable {
    /// Index of the highest-OA successful row, if any.
    pub fn best_index(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, row) in self.rows.iter().enumerate() {
            if let Some(m) = row.metrics() {
                if best.map_or(true, |(_, oa)| m.oa > oa) {
                    best = Some((i, m.oa));
                }
            }
        }
        best.map(|(i, _)| i)
    }

    pub fn to_markdown(&self) -> Result<String> {
        if self.rows.is_empty() {
            return Err(Error::Config("cannot report an empty results table".into()));
        }
        let best = self.best_index();
        let mut out = String::new();
        let _ = writeln!(out, "| Config | Seed | OA | F1 | Train (s) | Best epoch |");
        let _ = writeln!(out, "|---|---|---|---|---|---|");
        for (i, row) in self.rows.iter().enumerate() {
            let bold = |s: String| if Some(i) == best { format!("**{s}**") } else { s };
            match &row.outcome {
                TrialOutcome::Ok(m) => {
                    let _ = writeln!(
                        out,
                        "| {} | {} | {} | {} | {} | {} |",
                        bold(row.config_id.clone()),
                        bold(row.seed.to_string()),
                        bold(format!("{:.2}", m.oa)),
                        bold(format!("{:.2}", m.f1)),
                        bold(format!("{:.2}", m.train_seconds)),
                        bold(m.best_epoch.to_string()),
                    );
                }
                TrialOutcome::Failed(e) => {
                    let _ = writeln!(out, "| {} | {} | failed: {e} | | | |", row.config_id, row.seed);
                }
            }
        }
        Ok(out)
    }

    pub fn to_csv(&self) -> Result<String> {
        if self.rows.is_empty() {
            return Err(Error::Config("cannot report an empty results table".into()));
        }
        let mut out =
            String::from("config,hash,seed,status,oa,f1,train_seconds,epoch_seconds,best_epoch,error\n");
        for row in &self.rows {
            match &row.outcome {
                TrialOutcome::Ok(m) => {
                    let _ = writeln!(
                        out,
                        "{},{},{},ok,{},{},{},{},{},",
                        row.config_id,
                        row.config_hash,
                        row.seed,
                        m.oa,
                        m.f1,
                        m.train_seconds,
                        m.epoch_seconds,
                        m.best_epoch
                    );
                }
                TrialOutcome::Failed(e) => {
                    let _ = writeln!(
                        out,
                        "{},{},{},failed,,,,,,{e}",
                        row.config_id, row.config_hash, row.seed
                    );
                }
            }
        }
        Ok(out)
    }

    /// Architecture-grid view with one column per varied hyperparameter:
    /// `NB_CONV_LAYERS,NB_CONV_UNITS,NB_FC_UNITS,BATCH_SIZE,DROPOUT,FILTER_SIZE,OA`.
    /// Available when every successful row is a temporal_cnn trial.
    pub fn to_architecture_csv(&self) -> Result<String> {
        if self.rows.is_empty() {
            return Err(Error::Config("cannot report an empty results table".into()));
        }
        let mut out = String::from(
            "NB_CONV_LAYERS,NB_CONV_UNITS,NB_FC_UNITS,BATCH_SIZE,DROPOUT,FILTER_SIZE,OA\n",
        );
        for row in &self.rows {
            let Some(metrics) = row.metrics() else { continue };
            let (model, training) = parse_config_echo(&row.config_id)?;
            let ModelConfig::TemporalCnn(c) = model else {
                return Err(Error::Config(
                    "architecture table is defined for temporal_cnn grids only".into(),
                ));
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.2}",
                c.nb_conv_layers,
                c.nb_conv_units,
                c.nb_fc_units,
                training.batch_size,
                c.dropout,
                c.filter_size,
                metrics.oa
            );
        }
        Ok(out)
    }

    pub fn from_csv(text: &str) -> Result<ResultsTable> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.splitn(10, ',').collect();
            if fields.len() != 10 {
                return Err(Error::DataFormat {
                    path: "<results.csv>".into(),
                    row: i + 1,
                    message: format!("expected 10 fields, found {}", fields.len()),
                });
            }
            let parse_err = |what: &str| Error::DataFormat {
                path: "<results.csv>".into(),
                row: i + 1,
                message: format!("bad {what}"),
            };
            let seed = fields[2].parse::<u64>().map_err(|_| parse_err("seed"))?;
            let outcome = match fields[3] {
                "ok" => TrialOutcome::Ok(TrialMetrics {
                    oa: fields[4].parse().map_err(|_| parse_err("oa"))?,
                    f1: fields[5].parse().map_err(|_| parse_err("f1"))?,
                    train_seconds: fields[6].parse().map_err(|_| parse_err("train_seconds"))?,
                    epoch_seconds: fields[7].parse().map_err(|_| parse_err("epoch_seconds"))?,
                    best_epoch: fields[8].parse().map_err(|_| parse_err("best_epoch"))?,
                }),
                "failed" => TrialOutcome::Failed(fields[9].to_string()),
                other => return Err(parse_err(&format!("status '{other}'"))),
            };
            rows.push(TrialRow {
                config_id: fields[0].to_string(),
                config_hash: fields[1].to_string(),
                seed,
                outcome,
            });
        }
        Ok(ResultsTable { rows })
    }
}

/// Executed vs manifest-skipped trial counts of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunStats {
    pub executed: usize,
    pub skipped: usize,
    pub failed: usize,
}

// ---- trial plumbing ---------------------------------------------------------------

fn config_echo(model: &ModelConfig, training: &TrainingConfig) -> String {
    let mut parts = Vec::new();
    for (k, v) in model_config_to_kv(model)
        .to_text()
        .lines()
        .chain(training_config_to_kv(training).to_text().lines())
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim(), v.trim()))
    {
        parts.push(format!("{k}={v}"));
    }
    parts.join(";")
}

fn hash_of(echo: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(echo.as_bytes());
    let digest = hasher.finalize();
    digest.iter().take(8).fold(String::new(), |mut acc, b| {
        let _ = write!(acc, "{b:02x}");
        acc
    })
}

fn sanitize(message: &str) -> String {
    message.replace(['\n', ','], ";")
}

/// Rebuild a config pair from a config echo produced by this module.
pub fn parse_config_echo(echo: &str) -> Result<(ModelConfig, TrainingConfig)> {
    let text = echo.replace(';', "\n");
    let kv = KvConfig::parse(&text)?;
    Ok((model_config_from_kv(&kv)?, training_config_from_kv(&kv)?))
}

/// Load the source and produce normalised train/val/test splits.
pub fn prepare_dataset(
    source: &DatasetSource,
    split_spec: &SplitSpec,
) -> Result<(SitsDataset, SitsDataset, SitsDataset, crate::data::NormalizationStats)> {
    let (train, val, test) = match source {
        DatasetSource::Synthetic { spec } => {
            let ds = synth_generate(spec)?;
            split(&ds, split_spec)?
        }
        DatasetSource::File { path } => {
            let ds = load_dataset(path)?;
            split(&ds, split_spec)?
        }
        DatasetSource::SitsTsi { fold } => {
            let ds = load_sits_tsi(fold)?;
            split(&ds, split_spec)?
        }
        DatasetSource::Tiselac {
            features,
            labels,
            test_features,
            test_labels,
        } => {
            let ds = load_tiselac(features, labels)?;
            match (test_features, test_labels) {
                (Some(tf), Some(tl)) => {
                    // Published train/test division: carve only train/val here.
                    let inner = SplitSpec::new(
                        split_spec.train_fraction / (split_spec.train_fraction + split_spec.val_fraction),
                        split_spec.val_fraction / (split_spec.train_fraction + split_spec.val_fraction),
                        split_spec.seed,
                        split_spec.stratified,
                    )?;
                    let (train, val, _) = split(&ds, &inner)?;
                    let test = load_tiselac(tf, tl)?;
                    (train, val, test)
                }
                _ => split(&ds, split_spec)?,
            }
        }
    };
    let stats = fit_normalizer(&train, 2.0, 98.0)?;
    let train = apply_normalizer(&train, &stats)?;
    let val = apply_normalizer(&val, &stats)?;
    let test = apply_normalizer(&test, &stats)?;
    Ok((train, val, test, stats))
}

/// Load the whole dataset behind a source, without splitting. For the
/// two-file layout the published test files are preferred when present.
pub fn load_full(source: &DatasetSource) -> Result<SitsDataset> {
    match source {
        DatasetSource::Synthetic { spec } => synth_generate(spec),
        DatasetSource::File { path } => load_dataset(path),
        DatasetSource::SitsTsi { fold } => load_sits_tsi(fold),
        DatasetSource::Tiselac {
            features,
            labels,
            test_features,
            test_labels,
        } => match (test_features, test_labels) {
            (Some(tf), Some(tl)) => load_tiselac(tf, tl),
            _ => load_tiselac(features, labels),
        },
    }
}

fn run_trial(
    model_cfg: &ModelConfig,
    training_cfg: &TrainingConfig,
    seed: u64,
    mode: ExperimentMode,
    train_ds: &SitsDataset,
    val_ds: &SitsDataset,
    test_ds: &SitsDataset,
) -> Result<TrialMetrics> {
    let mut cfg = training_cfg.clone();
    cfg.seed = seed;
    if mode == ExperimentMode::Timing {
        cfg.batch_size = 128;
        cfg.max_epochs = 20;
        cfg.early_stopping = None;
    }
    let mut model = Model::build(
        model_cfg,
        train_ds.timesteps(),
        train_ds.channels(),
        train_ds.n_classes(),
        seed,
    )?;
    let log = train(&mut model, train_ds, val_ds, &cfg)?;
    let eval_ds = if test_ds.n() > 0 { test_ds } else { val_ds };
    let report = evaluate(&mut model, eval_ds, cfg.batch_size.max(32))?;
    Ok(TrialMetrics {
        oa: report.overall_accuracy,
        f1: report.f1_weighted,
        train_seconds: log.total_time,
        epoch_seconds: log.mean_epoch_seconds(),
        best_epoch: log.best_epoch,
    })
}

fn manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join("manifest.txt")
}

fn load_manifest(out_dir: &Path) -> Result<Vec<(String, u64, TrialOutcome)>> {
    let path = manifest_path(out_dir);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(&path)?;
    let mut entries = Vec::new();
    for line in text.lines() {
        let fields: Vec<&str> = line.splitn(8, ' ').collect();
        if fields.len() < 3 {
            continue;
        }
        let hash = fields[0].to_string();
        let seed: u64 = match fields[1].parse() {
            Ok(s) => s,
            Err(_) => continue,
        };
        if fields[2] == "failed" {
            entries.push((hash, seed, TrialOutcome::Failed(fields[3..].join(" "))));
        } else if fields.len() == 7 {
            let metrics = TrialMetrics {
                oa: fields[2].parse().unwrap_or(f64::NAN),
                f1: fields[3].parse().unwrap_or(f64::NAN),
                train_seconds: fields[4].parse().unwrap_or(f64::NAN),
                epoch_seconds: fields[5].parse().unwrap_or(f64::NAN),
                best_epoch: fields[6].parse().unwrap_or(0),
            };
            entries.push((hash, seed, TrialOutcome::Ok(metrics)));
        }
    }
    Ok(entries)
}

fn manifest_line(row: &TrialRow) -> String {
    match &row.outcome {
        TrialOutcome::Ok(m) => format!(
            "{} {} {} {} {} {} {}",
            row.config_hash, row.seed, m.oa, m.f1, m.train_seconds, m.epoch_seconds, m.best_epoch
        ),
        TrialOutcome::Failed(e) => {
            format!("{} {} failed {}", row.config_hash, row.seed, sanitize(e))
        }
    }
}

/// Run every trial of `spec`, resuming from the manifest in `out_dir` when
/// present. Trial failures become failed rows; the grid continues.
pub fn run_experiment(
    spec: &ExperimentSpec,
    out_dir: Option<&Path>,
    workers: usize,
) -> Result<(ResultsTable, RunStats)> {
    spec.validate()?;
    let (train_ds, val_ds, test_ds, _stats) = prepare_dataset(&spec.dataset, &spec.split)?;

    let trials = spec.trials();
    let mut cached: std::collections::HashMap<(String, u64), TrialOutcome> =
        std::collections::HashMap::new();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        for (hash, seed, outcome) in load_manifest(dir)? {
            cached.insert((hash, seed), outcome);
        }
    }

    let prepared: Vec<(String, String, u64, usize)> = trials
        .iter()
        .enumerate()
        .map(|(i, (m, t, seed))| {
            let echo = config_echo(m, t);
            let hash = hash_of(&echo);
            (echo, hash, *seed, i)
        })
        .collect();

    let rows: Mutex<Vec<Option<TrialRow>>> = Mutex::new(vec![None; trials.len()]);
    let stats = Mutex::new(RunStats::default());
    let manifest: Option<Mutex<std::fs::File>> = match out_dir {
        Some(dir) => Some(Mutex::new(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(manifest_path(dir))?,
        )),
        None => None,
    };

    let cursor = AtomicUsize::new(0);
    let worker_count = workers.max(1).min(trials.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..worker_count {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::SeqCst);
                if i >= trials.len() {
                    break;
                }
                let (echo, hash, seed, idx) = &prepared[i];
                let (model_cfg, training_cfg, _) = &trials[i];

                let (outcome, from_cache) = match cached.get(&(hash.clone(), *seed)) {
                    Some(hit) => (hit.clone(), true),
                    None => {
                        let outcome = match run_trial(
                            model_cfg,
                            training_cfg,
                            *seed,
                            spec.mode,
                            &train_ds,
                            &val_ds,
                            &test_ds,
                        ) {
                            Ok(metrics) => TrialOutcome::Ok(metrics),
                            Err(e) => TrialOutcome::Failed(sanitize(&e.to_string())),
                        };
                        (outcome, false)
                    }
                };

                let row = TrialRow {
                    config_id: echo.clone(),
                    config_hash: hash.clone(),
                    seed: *seed,
                    outcome,
                };
                {
                    let mut s = stats.lock().unwrap();
                    if from_cache {
                        s.skipped += 1;
                    } else {
                        s.executed += 1;
                        if row.metrics().is_none() {
                            s.failed += 1;
                        }
                        if let Some(m) = &manifest {
                            use std::io::Write as _;
                            let mut f = m.lock().unwrap();
                            let _ = writeln!(f, "{}", manifest_line(&row));
                        }
                    }
                }
                rows.lock().unwrap()[*idx] = Some(row);
            });
        }
    });

    let rows = rows
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every trial produces a row"))
        .collect();
    let stats = stats.into_inner().unwrap();
    Ok((ResultsTable { rows }, stats))
}

/// Write the table to `<out_dir>/results.md` or `.csv`.
pub fn emit_report(table: &ResultsTable, out_dir: &Path, format: ReportFormat) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let (name, contents) = match format {
        ReportFormat::Markdown => ("results.md", table.to_markdown()?),
        ReportFormat::Csv => ("results.csv", table.to_csv()?),
    };
    let path = out_dir.join(name);
    std::fs::write(&path, contents)?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

// ---- study presets ---------------------------------------------------------------

pub const STUDY_NAMES: [&str; 9] = [
    "width_tiselac",
    "width_sits_tsi",
    "depth_study",
    "filter_study",
    "dropout_study",
    "comparison_tiselac",
    "comparison_sits_tsi",
    "timing",
    "desk_synthetic",
];

fn tcnn(layers: usize, conv: usize, fc: usize, filter: usize, dropout: f64) -> ModelConfig {
    ModelConfig::TemporalCnn(TemporalCnnConfig {
        nb_conv_layers: layers,
        nb_conv_units: conv,
        nb_fc_units: fc,
        filter_size: filter,
        dropout,
    })
}

fn tcnn_training(batch_size: usize) -> TrainingConfig {
    TrainingConfig {
        learning_rate: 1e-3,
        weight_decay: 1e-6,
        batch_size,
        max_epochs: 200,
        early_stopping: Some(EarlyStoppingConfig::default()),
        ..TrainingConfig::default()
    }
}

/// Conventional file layout of a dataset directory.
pub fn default_source(tag: DatasetTag, data_dir: Option<&Path>) -> DatasetSource {
    match tag {
        DatasetTag::Tiselac => {
            let dir = data_dir.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("data/tiselac"));
            let test_features = dir.join("test_features.txt");
            let test_labels = dir.join("test_labels.txt");
            DatasetSource::Tiselac {
                features: dir.join("train_features.txt"),
                labels: dir.join("train_labels.txt"),
                test_features: test_features.exists().then_some(test_features),
                test_labels: test_labels.exists().then_some(test_labels),
            }
        }
        DatasetTag::SitsTsi => {
            let dir = data_dir.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("data/sits_tsi"));
            DatasetSource::SitsTsi { fold: dir.join("fold.txt") }
        }
        DatasetTag::Synthetic => DatasetSource::Synthetic {
            spec: SynthSpec::desk_default(),
        },
    }
}

/// Default split policy per dataset family.
pub fn split_for(tag: DatasetTag) -> SplitSpec {
    match tag {
        // Train/val carved from the published train set; test is separate.
        DatasetTag::Tiselac => SplitSpec::new(0.8, 0.2, 0, true).expect("valid split"),
        // One fold: 90:10 train/test, then 80:20 train/val, giving 72/18/10.
        DatasetTag::SitsTsi => SplitSpec::new(0.72, 0.18, 0, true).expect("valid split"),
        DatasetTag::Synthetic => SplitSpec::new(0.64, 0.16, 0, true).expect("valid split"),
    }
}

/// Reduced-width configurations for the desk-scale generalisation study.
pub fn desk_model_configs() -> Vec<ModelConfig> {
    vec![
        tcnn(3, 16, 32, 5, 0.1),
        ModelConfig::Mcdcnn(McdcnnConfig { dropout: 0.1 }),
        ModelConfig::TimeCnn(TimeCnnConfig { dropout: 0.1 }),
        ModelConfig::Rnn(RnnConfig {
            layers: 1,
            hidden: 16,
            fc_units: 32,
            dropout: 0.1,
        }),
        ModelConfig::InceptionTime(InceptionTimeConfig {
            modules: 2,
            filters: 8,
            dropout: 0.0,
        }),
        ModelConfig::Transformer(TransformerConfig {
            heads: 2,
            encoder_layers: 2,
            d_model: 16,
            d_inner: 32,
            dropout: 0.0,
        }),
    ]
}

/// Training recipe matching a desk-scale model's head.
pub fn desk_training_config(model: &ModelConfig) -> TrainingConfig {
    TrainingConfig {
        loss: match model {
            ModelConfig::TimeCnn(_) => LossKind::Mse,
            _ => LossKind::CrossEntropy,
        },
        batch_size: 32,
        max_epochs: 100,
        early_stopping: Some(EarlyStoppingConfig::default()),
        ..TrainingConfig::default()
    }
}

/// Desk-scale timing configurations: structure-faithful but narrow, except
/// InceptionTime which keeps its optimal depth.
pub fn timing_model_configs() -> Vec<ModelConfig> {
    vec![
        ModelConfig::TimeCnn(TimeCnnConfig { dropout: 0.1 }),
        ModelConfig::Mcdcnn(McdcnnConfig { dropout: 0.1 }),
        tcnn(3, 64, 128, 5, 0.1),
        ModelConfig::Rnn(RnnConfig {
            layers: 3,
            hidden: 48,
            fc_units: 64,
            dropout: 0.1,
        }),
        ModelConfig::InceptionTime(InceptionTimeConfig {
            modules: 4,
            filters: 32,
            dropout: 0.0,
        }),
        ModelConfig::Transformer(TransformerConfig {
            heads: 2,
            encoder_layers: 4,
            d_model: 32,
            d_inner: 64,
            dropout: 0.0,
        }),
    ]
}

fn comparison_spec(tag: DatasetTag, data_dir: Option<&Path>) -> Result<ExperimentSpec> {
    let suffix = tag.name();
    let mut model_grid = Vec::new();
    let mut training_grid = Vec::new();
    for variant in ["temporal_cnn", "time_cnn", "mcdcnn", "rnn", "inception_time", "transformer"] {
        let (m, t) = lookup(&format!("{variant}/{suffix}"))?;
        model_grid.push(m);
        training_grid.push(t);
    }
    Ok(ExperimentSpec {
        name: format!("comparison_{suffix}"),
        dataset: default_source(tag, data_dir),
        split: split_for(tag),
        model_grid,
        training_grid,
        paired: true,
        seeds: vec![1],
        mode: ExperimentMode::Grid,
    })
}

/// The grid for a named study, against its default dataset.
pub fn preset(name: &str) -> Result<ExperimentSpec> {
    preset_for(name, None, None)
}

/// The grid for a named study; `dataset` switches the per-dataset variants
/// (filter/depth/dropout studies default to the 23x10 dataset).
pub fn preset_for(
    name: &str,
    dataset: Option<DatasetTag>,
    data_dir: Option<&Path>,
) -> Result<ExperimentSpec> {
    let known = || STUDY_NAMES.join(", ");
    let spec = match name {
        "width_tiselac" => {
            let widths = [
                (64, 64),
                (64, 128),
                (64, 256),
                (64, 512),
                (128, 128),
                (128, 256),
                (256, 256),
                (512, 256),
                (512, 512),
                (512, 1024),
                (512, 2048),
                (1024, 256),
            ];
            ExperimentSpec {
                name: name.into(),
                dataset: default_source(DatasetTag::Tiselac, data_dir),
                split: split_for(DatasetTag::Tiselac),
                model_grid: widths.iter().map(|&(c, f)| tcnn(3, c, f, 5, 0.2)).collect(),
                training_grid: vec![tcnn_training(128)],
                paired: false,
                seeds: vec![1],
                mode: ExperimentMode::Grid,
            }
        }
        "width_sits_tsi" => {
            let widths = [(64, 256), (128, 256), (256, 128), (256, 256)];
            ExperimentSpec {
                name: name.into(),
                dataset: default_source(DatasetTag::SitsTsi, data_dir),
                split: split_for(DatasetTag::SitsTsi),
                model_grid: widths.iter().map(|&(c, f)| tcnn(3, c, f, 5, 0.2)).collect(),
                training_grid: vec![tcnn_training(256)],
                paired: false,
                seeds: vec![1],
                mode: ExperimentMode::Grid,
            }
        }
        "depth_study" => {
            let tag = dataset.unwrap_or(DatasetTag::Tiselac);
            ExperimentSpec {
                name: name.into(),
                dataset: default_source(tag, data_dir),
                split: split_for(tag),
                model_grid: (2..=5).map(|l| tcnn(l, 128, 256, 5, 0.2)).collect(),
                training_grid: vec![tcnn_training(if tag == DatasetTag::SitsTsi { 256 } else { 128 })],
                paired: false,
                seeds: vec![1],
                mode: ExperimentMode::Grid,
            }
        }
        "filter_study" => {
            let tag = dataset.unwrap_or(DatasetTag::Tiselac);
            let filters: &[usize] = if tag == DatasetTag::SitsTsi {
                &[3, 5, 7, 9]
            } else {
                &[3, 5, 7]
            };
            ExperimentSpec {
                name: name.into(),
                dataset: default_source(tag, data_dir),
                split: split_for(tag),
                model_grid: filters.iter().map(|&f| tcnn(3, 128, 256, f, 0.2)).collect(),
                training_grid: vec![tcnn_training(if tag == DatasetTag::SitsTsi { 256 } else { 128 })],
                paired: false,
                seeds: vec![1],
                mode: ExperimentMode::Grid,
            }
        }
        "dropout_study" => {
            let tag = dataset.unwrap_or(DatasetTag::Tiselac);
            let rates = [0.1, 0.15, 0.182, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5];
            ExperimentSpec {
                name: name.into(),
                dataset: default_source(tag, data_dir),
                split: split_for(tag),
                model_grid: rates.iter().map(|&d| tcnn(3, 128, 256, 5, d)).collect(),
                training_grid: vec![tcnn_training(if tag == DatasetTag::SitsTsi { 256 } else { 128 })],
                paired: false,
                seeds: vec![1],
                mode: ExperimentMode::Grid,
            }
        }
        "comparison_tiselac" => comparison_spec(DatasetTag::Tiselac, data_dir)?,
        "comparison_sits_tsi" => comparison_spec(DatasetTag::SitsTsi, data_dir)?,
        "timing" => {
            let models = timing_model_configs();
            let training_grid = models.iter().map(desk_training_config).collect();
            ExperimentSpec {
                name: name.into(),
                dataset: DatasetSource::Synthetic {
                    spec: SynthSpec::seasonal(5, 23, 10, 5000, 0.1, 7),
                },
                split: SplitSpec::new(0.8, 0.2, 0, true).expect("valid split"),
                model_grid: models,
                training_grid,
                paired: true,
                seeds: vec![1],
                mode: ExperimentMode::Timing,
            }
        }
        "desk_synthetic" => {
            let models = desk_model_configs();
            let training_grid = models.iter().map(desk_training_config).collect();
            ExperimentSpec {
                name: name.into(),
                dataset: DatasetSource::Synthetic {
                    spec: SynthSpec::desk_default(),
                },
                split: split_for(DatasetTag::Synthetic),
                model_grid: models,
                training_grid,
                paired: true,
                seeds: vec![1],
                mode: ExperimentMode::Grid,
            }
        }
        other => {
            return Err(Error::UnknownName {
                name: other.into(),
                known: known(),
            })
        }
    };
    Ok(spec)
}

/// Parse an experiment spec file: base model/training keys plus `grid.<key>`
/// comma lists (cartesian product), `dataset`, split and seed settings.
pub fn experiment_from_file(path: &Path) -> Result<ExperimentSpec> {
    let kv = KvConfig::parse_file(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));

    let dataset = match kv.require("dataset")? {
        "synthetic" | "synth" => {
            let spec = SynthSpec::seasonal(
                kv.get_usize("synth_classes")?.unwrap_or(5),
                kv.get_usize("synth_timesteps")?.unwrap_or(23),
                kv.get_usize("synth_channels")?.unwrap_or(10),
                kv.get_usize("synth_samples")?.unwrap_or(2000),
                kv.get_f64("synth_sigma")?.unwrap_or(0.1),
                kv.get_u64("synth_seed")?.unwrap_or(7),
            );
            DatasetSource::Synthetic { spec }
        }
        "file" => DatasetSource::File {
            path: dir.join(kv.require("data_path")?),
        },
        "tiselac" => DatasetSource::Tiselac {
            features: dir.join(kv.require("features_path")?),
            labels: dir.join(kv.require("labels_path")?),
            test_features: kv.get("test_features_path").map(|p| dir.join(p)),
            test_labels: kv.get("test_labels_path").map(|p| dir.join(p)),
        },
        "sits_tsi" | "sits-tsi" => DatasetSource::SitsTsi {
            fold: dir.join(kv.require("fold_path")?),
        },
        other => {
            return Err(Error::UnknownName {
                name: other.into(),
                known: "synthetic, file, tiselac, sits_tsi".into(),
            })
        }
    };

    let split = SplitSpec::new(
        kv.get_f64("train_fraction")?.unwrap_or(0.64),
        kv.get_f64("val_fraction")?.unwrap_or(0.16),
        kv.get_u64("split_seed")?.unwrap_or(0),
        kv.get_bool("stratified")?.unwrap_or(true),
    )?;

    // Cartesian product over grid.* keys applied to the base config.
    let grid_keys: Vec<String> = kv
        .keys()
        .filter(|k| k.starts_with("grid."))
        .map(str::to_string)
        .collect();
    let mut model_variants: Vec<KvConfig> = vec![{
        let mut base = KvConfig::new();
        for key in kv.keys() {
            if !key.starts_with("grid.") {
                base.set(key, kv.get(key).unwrap());
            }
        }
        base
    }];
    for gk in &grid_keys {
        let field = gk.trim_start_matches("grid.");
        let values: Vec<String> = kv
            .get(gk)
            .unwrap()
            .split(',')
            .map(|v| v.trim().to_string())
            .collect();
        let mut next = Vec::with_capacity(model_variants.len() * values.len());
        for variant in &model_variants {
            for value in &values {
                let mut kv2 = variant.clone();
                kv2.set(field, value);
                next.push(kv2);
            }
        }
        model_variants = next;
    }

    let mut model_grid = Vec::new();
    let mut training_grid = Vec::new();
    let mut seen_training = std::collections::HashSet::new();
    for variant in &model_variants {
        model_grid.push(model_config_from_kv(variant)?);
        let t = training_config_from_kv(variant)?;
        let echo = training_config_to_kv(&t).to_text();
        if seen_training.insert(echo) {
            training_grid.push(t);
        }
    }
    model_grid.dedup();

    let seeds: Vec<u64> = match kv.get("seeds") {
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("bad seed '{s}'")))
            })
            .collect::<Result<_>>()?,
        None => vec![kv.get_u64("seed")?.unwrap_or(0)],
    };

    let mode = match kv.get("mode").unwrap_or("grid") {
        "single" => ExperimentMode::Single,
        "grid" => ExperimentMode::Grid,
        "timing" => ExperimentMode::Timing,
        other => {
            return Err(Error::UnknownName {
                name: other.into(),
                known: "single, grid, timing".into(),
            })
        }
    };

    Ok(ExperimentSpec {
        name: kv.get("name").unwrap_or("experiment").to_string(),
        dataset,
        split,
        model_grid,
        training_grid,
        paired: false,
        seeds,
        mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(seeds: Vec<u64>) -> ExperimentSpec {
        ExperimentSpec {
            name: "tiny".into(),
            dataset: DatasetSource::Synthetic {
                spec: SynthSpec::seasonal(3, 10, 3, 90, 0.1, 5),
            },
            split: SplitSpec::new(0.6, 0.2, 1, true).unwrap(),
            model_grid: vec![tcnn(2, 4, 8, 3, 0.1), tcnn(2, 6, 8, 3, 0.1)],
            training_grid: vec![TrainingConfig {
                batch_size: 16,
                max_epochs: 3,
                early_stopping: None,
                ..TrainingConfig::default()
            }],
            paired: false,
            seeds,
            mode: ExperimentMode::Grid,
        }
    }

    #[test]
    fn grid_enumerates_and_is_deterministic() {
        let spec = tiny_spec(vec![1]);
        let (table, stats) = run_experiment(&spec, None, 2).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(stats.executed, 2);
        assert!(table.rows.iter().all(|r| r.metrics().is_some()));

        let (table2, _) = run_experiment(&spec, None, 1).unwrap();
        for (a, b) in table.rows.iter().zip(&table2.rows) {
            assert_eq!(a.metrics().unwrap().oa.to_bits(), b.metrics().unwrap().oa.to_bits());
        }
    }

    #[test]
    fn manifest_resume_skips_completed_trials() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(vec![1, 2]);
        let (first, stats1) = run_experiment(&spec, Some(dir.path()), 2).unwrap();
        assert_eq!(stats1.executed, 4);
        let (second, stats2) = run_experiment(&spec, Some(dir.path()), 2).unwrap();
        assert_eq!(stats2.executed, 0);
        assert_eq!(stats2.skipped, 4);
        assert_eq!(first, second);
    }

    #[test]
    fn single_row_rerun_reproduces_oa() {
        let spec = tiny_spec(vec![7]);
        let (table, _) = run_experiment(&spec, None, 1).unwrap();
        let row = &table.rows[1];

        let (model_cfg, training_cfg) = parse_config_echo(&row.config_id).unwrap();
        let solo = ExperimentSpec {
            model_grid: vec![model_cfg],
            training_grid: vec![training_cfg],
            seeds: vec![row.seed],
            ..spec.clone()
        };
        let (again, _) = run_experiment(&solo, None, 1).unwrap();
        let a = row.metrics().unwrap();
        let b = again.rows[0].metrics().unwrap();
        assert!((a.oa - b.oa).abs() < 1e-9);
    }

    #[test]
    fn failed_trials_are_recorded_and_grid_continues() {
        let mut spec = tiny_spec(vec![1]);
        // An incompatible pairing: softmax heads against MSE.
        spec.training_grid = vec![TrainingConfig {
            loss: LossKind::Mse,
            batch_size: 16,
            max_epochs: 2,
            early_stopping: None,
            ..TrainingConfig::default()
        }];
        let (table, stats) = run_experiment(&spec, None, 1).unwrap();
        assert_eq!(stats.failed, 2);
        assert!(table.rows.iter().all(|r| matches!(r.outcome, TrialOutcome::Failed(_))));
        assert!(table.best_index().is_none());
    }

    #[test]
    fn csv_round_trips() {
        let spec = tiny_spec(vec![1]);
        let (mut table, _) = run_experiment(&spec, None, 2).unwrap();
        table.rows.push(TrialRow {
            config_id: "model=x".into(),
            config_hash: "deadbeef".into(),
            seed: 9,
            outcome: TrialOutcome::Failed("shape mismatch: expected [2]; got [3]".into()),
        });
        let csv = table.to_csv().unwrap();
        let parsed = ResultsTable::from_csv(&csv).unwrap();
        assert_eq!(parsed, table);
    }

    #[test]
    fn architecture_table_matches_grid_schema() {
        let spec = tiny_spec(vec![1]);
        let (table, _) = run_experiment(&spec, None, 1).unwrap();
        let csv = table.to_architecture_csv().unwrap();
        assert_eq!(
            csv.lines().next().unwrap(),
            "NB_CONV_LAYERS,NB_CONV_UNITS,NB_FC_UNITS,BATCH_SIZE,DROPOUT,FILTER_SIZE,OA"
        );
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("2,4,8,16,0.1,3,"));
    }

    #[test]
    fn markdown_bolds_best_row() {
        let spec = tiny_spec(vec![1]);
        let (table, _) = run_experiment(&spec, None, 2).unwrap();
        let md = table.to_markdown().unwrap();
        assert_eq!(md.matches("**").count() % 2, 0);
        assert!(md.contains("**"));
        let empty = ResultsTable::default();
        assert!(empty.to_markdown().is_err());
        assert!(empty.to_csv().is_err());
    }

    #[test]
    fn study_presets_enumerate() {
        for name in STUDY_NAMES {
            let spec = preset(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            spec.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        assert!(matches!(preset("bogus"), Err(Error::UnknownName { .. })));

        let filters = preset("filter_study").unwrap();
        assert_eq!(filters.model_grid.len(), 3);
        let filters_long = preset_for("filter_study", Some(DatasetTag::SitsTsi), None).unwrap();
        assert_eq!(filters_long.model_grid.len(), 4);

        let depth = preset("depth_study").unwrap();
        assert_eq!(depth.model_grid.len(), 4);

        let dropout = preset("dropout_study").unwrap();
        assert_eq!(dropout.model_grid.len(), 10);

        let timing = preset("timing").unwrap();
        assert_eq!(timing.mode, ExperimentMode::Timing);
        assert_eq!(timing.model_grid.len(), 6);

        let width = preset("width_tiselac").unwrap();
        assert_eq!(width.model_grid.len(), 12);
    }

    #[test]
    fn experiment_file_grids_expand() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.cfg");
        std::fs::write(
            &path,
            "name = widths\n\
             dataset = synthetic\n\
             synth_samples = 60\n\
             synth_classes = 3\n\
             synth_timesteps = 10\n\
             synth_channels = 2\n\
             model = temporal_cnn\n\
             nb_conv_layers = 2\n\
             nb_conv_units = 4\n\
             nb_fc_units = 8\n\
             filter_size = 3\n\
             dropout = 0.1\n\
             grid.nb_conv_units = 4,8\n\
             grid.nb_fc_units = 8\n\
             batch_size = 16\n\
             max_epochs = 2\n\
             early_stopping = off\n\
             seeds = 1,2\n",
        )
        .unwrap();
        let spec = experiment_from_file(&path).unwrap();
        assert_eq!(spec.model_grid.len(), 2);
        assert_eq!(spec.training_grid.len(), 1);
        assert_eq!(spec.seeds, vec![1, 2]);
        let (table, _) = run_experiment(&spec, None, 2).unwrap();
        assert_eq!(table.rows.len(), 4);
    }
}
