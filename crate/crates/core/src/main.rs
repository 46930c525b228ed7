use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sits_tempo::config::{model_config_from_kv, training_config_from_kv, KvConfig};
use sits_tempo::data::{apply_normalizer, save_dataset, synth_generate, SitsDataset, SynthSpec};
use sits_tempo::evaluation::evaluate;
use sits_tempo::harness::{
    self, default_source, emit_report, experiment_from_file, load_full, prepare_dataset,
    run_experiment, split_for, DatasetSource, ReportFormat, ResultsTable,
};
use sits_tempo::model_io::{load_model, save_model};
use sits_tempo::models::{Model, ModelConfig, ModelVariant};
use sits_tempo::presets::{self, DatasetTag};
use sits_tempo::training::{train, TrainingConfig};
use sits_tempo::{Error, Result};

/// Seed override honoured when `--seed` is absent.
const SEED_ENV: &str = "SITS_TEMPO_SEED";

#[derive(Parser)]
#[command(
    name = "sits-tempo",
    about = "Train, evaluate and benchmark time-series classifiers on satellite pixel data",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write the model file, logs and report.
    Train {
        /// Dataset family: tiselac | sits-tsi | synth
        #[arg(long)]
        dataset: String,
        /// Directory holding the dataset files (conventional names).
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Architecture variant; its committed preset supplies the defaults.
        #[arg(long)]
        model: Option<String>,
        /// Config file carrying model and training keys (overrides --model).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed for initialisation, shuffling and dropout.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved model file on a dataset.
    Evaluate {
        #[arg(long)]
        model_file: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a study preset or an experiment spec file.
    Grid {
        /// Named study; see `grid --preset help`.
        #[arg(long)]
        preset: Option<String>,
        /// Experiment spec file (key-value schema with grid.* lists).
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Override the study's dataset family.
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset file (plus sidecar metadata).
    Synth {
        /// Generator settings file; desk-scale defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-emit a results table from a run directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        /// markdown | csv
        #[arg(long, default_value = "markdown")]
        format: String,
    },
}

fn env_seed() -> Option<u64> {
    std::env::var(SEED_ENV).ok().and_then(|v| v.parse().ok())
}

fn resolve_source(dataset: &str, data_dir: Option<&Path>) -> Result<DatasetSource> {
    let tag = DatasetTag::from_name(dataset)?;
    if tag == DatasetTag::Synthetic {
        if let Some(dir) = data_dir {
            let path = dir.join("synth.txt");
            if path.exists() {
                return Ok(DatasetSource::File { path });
            }
        }
    }
    Ok(default_source(tag, data_dir))
}

/// Model and training settings for a train run: an explicit config file, or
/// the committed preset of the chosen variant on this dataset family.
fn resolve_configs(
    dataset: &str,
    model: Option<&str>,
    config: Option<&Path>,
) -> Result<(ModelConfig, TrainingConfig)> {
    if let Some(path) = config {
        let kv = KvConfig::parse_file(path)?;
        return Ok((model_config_from_kv(&kv)?, training_config_from_kv(&kv)?));
    }
    let variant = ModelVariant::from_name(model.ok_or_else(|| {
        Error::Config("either --config or --model is required".into())
    })?)?;
    let tag = DatasetTag::from_name(dataset)?;
    match tag {
        DatasetTag::Tiselac | DatasetTag::SitsTsi => {
            presets::lookup(&format!("{}/{}", variant.name(), tag.name()))
        }
        DatasetTag::Synthetic => {
            let idx = harness::desk_model_configs()
                .into_iter()
                .position(|m| m.variant() == variant)
                .expect("every variant has a desk config");
            let model_cfg = harness::desk_model_configs().swap_remove(idx);
            let training = harness::desk_training_config(&model_cfg);
            Ok((model_cfg, training))
        }
    }
}

fn synth_spec_from_file(path: &Path) -> Result<SynthSpec> {
    let kv = KvConfig::parse_file(path)?;
    let mut spec = SynthSpec::seasonal(
        kv.get_usize("classes")?.unwrap_or(5),
        kv.get_usize("timesteps")?.unwrap_or(23),
        kv.get_usize("channels")?.unwrap_or(10),
        kv.get_usize("n_samples")?.unwrap_or(2000),
        kv.get_f64("noise_sigma")?.unwrap_or(0.1),
        kv.get_u64("seed")?.unwrap_or(7),
    );
    if let Some(props) = kv.get("proportions") {
        spec.proportions = props
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad proportion '{p}'")))
            })
            .collect::<Result<_>>()?;
    }
    spec.validate()?;
    Ok(spec)
}

fn write_run_outputs(
    out: &Path,
    model: &Model,
    stats: &sits_tempo::data::NormalizationStats,
    log: &sits_tempo::training::TrainLog,
    report: &sits_tempo::evaluation::EvaluationReport,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    save_model(model, Some(stats), &out.join("model.stm"))?;
    std::fs::write(out.join("train_log.csv"), log.to_csv())?;
    std::fs::write(out.join("train_log.txt"), log.to_text())?;
    let method = model.config().variant().name();
    std::fs::write(out.join("report.md"), report.to_markdown(method))?;
    std::fs::write(out.join("report.csv"), report.to_csv(method))?;
    std::fs::write(out.join("confusion.csv"), report.confusion.to_csv())?;
    Ok(())
}

fn cmd_train(
    dataset: &str,
    data_dir: Option<&Path>,
    model_name: Option<&str>,
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let source = resolve_source(dataset, data_dir)?;
    let tag = DatasetTag::from_name(dataset)?;
    let (train_ds, val_ds, test_ds, stats) = prepare_dataset(&source, &split_for(tag))?;
    let (model_cfg, mut training_cfg) = resolve_configs(dataset, model_name, config)?;
    if let Some(s) = seed.or_else(env_seed) {
        training_cfg.seed = s;
    }

    let mut model = Model::build(
        &model_cfg,
        train_ds.timesteps(),
        train_ds.channels(),
        train_ds.n_classes(),
        training_cfg.seed,
    )?;
    println!(
        "training {} on {} ({} train / {} val / {} test samples, seed {})",
        model_cfg.variant().name(),
        dataset,
        train_ds.n(),
        val_ds.n(),
        test_ds.n(),
        training_cfg.seed
    );
    let log = train(&mut model, &train_ds, &val_ds, &training_cfg)?;
    let eval_ds: &SitsDataset = if test_ds.n() > 0 { &test_ds } else { &val_ds };
    let mut report = evaluate(&mut model, eval_ds, training_cfg.batch_size.max(32))?;
    report.train_time_seconds = Some(log.total_time);

    write_run_outputs(out, &model, &stats, &log, &report)?;
    println!(
        "finished after {} epochs ({}): OA {:.2}, weighted F1 {:.2}; outputs in {}",
        log.epochs.len(),
        log.stopped_reason,
        report.overall_accuracy,
        report.f1_weighted,
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(model_file: &Path, dataset: &str, data_dir: Option<&Path>, out: &Path) -> Result<()> {
    let (mut model, stats) = load_model(model_file)?;
    let stats = stats.ok_or_else(|| {
        Error::Config("model file carries no normalisation statistics; retrain with this build".into())
    })?;
    let source = resolve_source(dataset, data_dir)?;
    let raw = load_full(&source)?;
    let ds = apply_normalizer(&raw, &stats)?;
    let report = evaluate(&mut model, &ds, 256)?;

    std::fs::create_dir_all(out)?;
    let method = model.config().variant().name();
    std::fs::write(out.join("report.md"), report.to_markdown(method))?;
    std::fs::write(out.join("report.csv"), report.to_csv(method))?;
    std::fs::write(out.join("confusion.csv"), report.confusion.to_csv())?;
    println!(
        "evaluated {} samples: OA {:.2}, weighted F1 {:.2}; report in {}",
        report.n_samples,
        report.overall_accuracy,
        report.f1_weighted,
        out.display()
    );
    Ok(())
}

fn cmd_grid(
    preset: Option<&str>,
    spec: Option<&Path>,
    dataset: Option<&str>,
    data_dir: Option<&Path>,
    workers: usize,
    out: &Path,
) -> Result<()> {
    let spec = match (preset, spec) {
        (Some(name), None) => {
            let tag = dataset.map(DatasetTag::from_name).transpose()?;
            harness::preset_for(name, tag, data_dir)?
        }
        (None, Some(path)) => experiment_from_file(path)?,
        _ => {
            return Err(Error::Config(
                "exactly one of --preset or --spec is required".into(),
            ))
        }
    };
    println!(
        "running '{}': {} model configs x {} training configs x {} seeds",
        spec.name,
        spec.model_grid.len(),
        spec.training_grid.len(),
        spec.seeds.len()
    );
    let (table, stats) = run_experiment(&spec, Some(out), workers)?;
    let md = emit_report(&table, out, ReportFormat::Markdown)?;
    emit_report(&table, out, ReportFormat::Csv)?;
    if let Ok(arch_csv) = table.to_architecture_csv() {
        std::fs::write(out.join("architecture_table.csv"), arch_csv)?;
    }
    println!(
        "{} trials executed, {} resumed from manifest, {} failed; report at {}",
        stats.executed,
        stats.skipped,
        stats.failed,
        md.display()
    );
    if let Some(best) = table.best_index() {
        let row = &table.rows[best];
        if let Some(m) = row.metrics() {
            println!("best row: OA {:.2} (seed {}) {}", m.oa, row.seed, row.config_id);
        }
    }
    Ok(())
}

fn cmd_synth(spec: Option<&Path>, out: &Path) -> Result<()> {
    let spec = match spec {
        Some(path) => synth_spec_from_file(path)?,
        None => SynthSpec::desk_default(),
    };
    let ds = synth_generate(&spec)?;
    let meta = vec![
        ("seed".to_string(), spec.seed.to_string()),
        ("noise_sigma".to_string(), spec.noise_sigma.to_string()),
    ];
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_dataset(&ds, out, &meta)?;
    println!(
        "wrote {} samples ({} timesteps x {} channels, {} classes) to {}",
        ds.n(),
        ds.timesteps(),
        ds.channels(),
        ds.n_classes(),
        out.display()
    );
    Ok(())
}

fn cmd_report(input: &Path, format: &str) -> Result<()> {
    let csv_path = input.join("results.csv");
    let table = ResultsTable::from_csv(&std::fs::read_to_string(&csv_path)?)?;
    match format {
        "markdown" => {
            let path = emit_report(&table, input, ReportFormat::Markdown)?;
            println!("{}", std::fs::read_to_string(&path)?);
        }
        "csv" => {
            let path = emit_report(&table, input, ReportFormat::Csv)?;
            println!("wrote {}", path.display());
        }
        other => {
            return Err(Error::UnknownName {
                name: other.into(),
                known: "markdown, csv".into(),
            })
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            dataset,
            data_dir,
            model,
            config,
            seed,
            out,
        } => cmd_train(
            &dataset,
            data_dir.as_deref(),
            model.as_deref(),
            config.as_deref(),
            seed,
            &out,
        ),
        Command::Evaluate {
            model_file,
            dataset,
            data_dir,
            out,
        } => cmd_evaluate(&model_file, &dataset, data_dir.as_deref(), &out),
        Command::Grid {
            preset,
            spec,
            dataset,
            data_dir,
            workers,
            out,
        } => cmd_grid(
            preset.as_deref(),
            spec.as_deref(),
            dataset.as_deref(),
            data_dir.as_deref(),
            workers,
            &out,
        ),
        Command::Synth { spec, out } => cmd_synth(spec.as_deref(), &out),
        Command::Report { input, format } => cmd_report(&input, &format),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
