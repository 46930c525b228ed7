//! Python bindings for the sits-tempo engine: datasets, normalisation,
//! model building, training and evaluation.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use sits_tempo::config::{model_config_from_kv, training_config_from_kv, KvConfig};
use sits_tempo::data as core_data;
use sits_tempo::data::{SitsDataset, SplitSpec, SynthSpec};
use sits_tempo::evaluation as core_eval;
use sits_tempo::model_io;
use sits_tempo::models::Model as CoreModel;
use sits_tempo::training as core_training;

fn err(e: sits_tempo::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A set of per-pixel time series with integer labels.
#[pyclass(name = "Dataset", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: SitsDataset,
}

#[pymethods]
impl PyDataset {
    /// Generate a separable synthetic dataset of seasonal profiles.
    #[staticmethod]
    #[pyo3(signature = (classes=5, timesteps=23, channels=10, n_samples=2000, noise_sigma=0.1, seed=7))]
    fn synthetic(
        classes: usize,
        timesteps: usize,
        channels: usize,
        n_samples: usize,
        noise_sigma: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = SynthSpec::seasonal(classes, timesteps, channels, n_samples, noise_sigma, seed);
        Ok(PyDataset {
            inner: core_data::synth_generate(&spec).map_err(err)?,
        })
    }

    /// Load the 230-field features + labels file pair.
    #[staticmethod]
    fn load_tiselac(features: PathBuf, labels: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: core_data::load_tiselac(&features, &labels).map_err(err)?,
        })
    }

    /// Load the 46-value + trailing-label fold layout.
    #[staticmethod]
    fn load_sits_tsi(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: core_data::load_sits_tsi(&path).map_err(err)?,
        })
    }

    /// Load a dataset saved with its `.meta` sidecar.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: core_data::load_dataset(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        core_data::save_dataset(&self.inner, &path, &[]).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn timesteps(&self) -> usize {
        self.inner.timesteps()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    fn class_names(&self) -> Vec<String> {
        self.inner.class_names().to_vec()
    }

    /// Sample `i` as a `timesteps x channels` nested list.
    fn sample(&self, i: usize) -> PyResult<Vec<Vec<f64>>> {
        if i >= self.inner.n() {
            return Err(PyValueError::new_err(format!("sample {i} out of range")));
        }
        let (t, c) = (self.inner.timesteps(), self.inner.channels());
        Ok((0..t)
            .map(|ti| (0..c).map(|ci| self.inner.samples().at(&[i, ti, ci])).collect())
            .collect())
    }

    /// Deterministic train/val/test split; test takes the remainder.
    #[pyo3(signature = (train_fraction, val_fraction, seed=0, stratified=true))]
    fn split(
        &self,
        train_fraction: f64,
        val_fraction: f64,
        seed: u64,
        stratified: bool,
    ) -> PyResult<(PyDataset, PyDataset, PyDataset)> {
        let spec = SplitSpec::new(train_fraction, val_fraction, seed, stratified).map_err(err)?;
        let (a, b, c) = core_data::split(&self.inner, &spec).map_err(err)?;
        Ok((PyDataset { inner: a }, PyDataset { inner: b }, PyDataset { inner: c }))
    }

    fn class_histogram(&self) -> Vec<usize> {
        self.inner.class_histogram()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, timesteps={}, channels={}, classes={}, provenance='{}')",
            self.inner.n(),
            self.inner.timesteps(),
            self.inner.channels(),
            self.inner.n_classes(),
            self.inner.provenance()
        )
    }
}

/// Percentile min-max normaliser fitted on a training split.
#[pyclass(name = "Normalizer")]
struct PyNormalizer {
    stats: core_data::NormalizationStats,
}

#[pymethods]
impl PyNormalizer {
    #[staticmethod]
    #[pyo3(signature = (train, low_percentile=2.0, high_percentile=98.0))]
    fn fit(train: &PyDataset, low_percentile: f64, high_percentile: f64) -> PyResult<Self> {
        Ok(PyNormalizer {
            stats: core_data::fit_normalizer(&train.inner, low_percentile, high_percentile)
                .map_err(err)?,
        })
    }

    fn apply(&self, ds: &PyDataset) -> PyResult<PyDataset> {
        Ok(PyDataset {
            inner: core_data::apply_normalizer(&ds.inner, &self.stats).map_err(err)?,
        })
    }

    fn fingerprint(&self) -> String {
        self.stats.fingerprint()
    }
}

/// Per-epoch training history.
#[pyclass(name = "TrainLog")]
struct PyTrainLog {
    #[pyo3(get)]
    best_epoch: usize,
    #[pyo3(get)]
    stopped_reason: String,
    #[pyo3(get)]
    total_time: f64,
    /// Rows of (epoch, train_loss, train_acc, val_loss, val_acc).
    #[pyo3(get)]
    epochs: Vec<(usize, f64, f64, f64, f64)>,
}

/// Evaluation metrics of one model on one dataset.
#[pyclass(name = "Report")]
struct PyReport {
    #[pyo3(get)]
    overall_accuracy: f64,
    #[pyo3(get)]
    f1_weighted: f64,
    #[pyo3(get)]
    f1_macro: f64,
    #[pyo3(get)]
    per_class_accuracy: Vec<Option<f64>>,
    #[pyo3(get)]
    confusion: Vec<Vec<u64>>,
    #[pyo3(get)]
    n_samples: usize,
}

/// A built classification network.
#[pyclass(name = "Model")]
struct PyModel {
    inner: CoreModel,
}

#[pymethods]
impl PyModel {
    /// Build from config text (`model = ...` plus hyperparameter keys).
    #[staticmethod]
    fn build(
        config_text: &str,
        timesteps: usize,
        channels: usize,
        classes: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let kv = KvConfig::parse(config_text).map_err(err)?;
        let cfg = model_config_from_kv(&kv).map_err(err)?;
        Ok(PyModel {
            inner: CoreModel::build(&cfg, timesteps, channels, classes, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (model, _) = model_io::load_model(&path).map_err(err)?;
        Ok(PyModel { inner: model })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model_io::save_model(&self.inner, None, &path).map_err(err)
    }

    fn count_parameters(&self) -> usize {
        self.inner.count_parameters()
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.config().variant().name().to_string()
    }

    /// Train on (train, val) with training-config text; returns the log.
    fn train(
        &mut self,
        train: &PyDataset,
        val: &PyDataset,
        training_text: &str,
    ) -> PyResult<PyTrainLog> {
        let kv = KvConfig::parse(training_text).map_err(err)?;
        let cfg = training_config_from_kv(&kv).map_err(err)?;
        let log =
            core_training::train(&mut self.inner, &train.inner, &val.inner, &cfg).map_err(err)?;
        Ok(PyTrainLog {
            best_epoch: log.best_epoch,
            stopped_reason: log.stopped_reason.to_string(),
            total_time: log.total_time,
            epochs: log
                .epochs
                .iter()
                .map(|e| (e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc))
                .collect(),
        })
    }

    #[pyo3(signature = (ds, batch_size=256))]
    fn evaluate(&mut self, ds: &PyDataset, batch_size: usize) -> PyResult<PyReport> {
        let report = core_eval::evaluate(&mut self.inner, &ds.inner, batch_size).map_err(err)?;
        let k = report.confusion.k();
        let confusion = (0..k)
            .map(|y| (0..k).map(|p| report.confusion.at(y, p)).collect())
            .collect();
        Ok(PyReport {
            overall_accuracy: report.overall_accuracy,
            f1_weighted: report.f1_weighted,
            f1_macro: report.f1_macro,
            per_class_accuracy: report.per_class_accuracy,
            confusion,
            n_samples: report.n_samples,
        })
    }

    /// Eval-mode class predictions for every sample of `ds`.
    fn predict(&mut self, ds: &PyDataset) -> PyResult<Vec<usize>> {
        let indices: Vec<usize> = (0..ds.inner.n()).collect();
        let mut out = Vec::with_capacity(ds.inner.n());
        for chunk in indices.chunks(256) {
            let batch = ds.inner.batch(chunk);
            out.extend(self.inner.predict(&batch).map_err(err)?);
        }
        Ok(out)
    }
}

/// Names of the committed model presets.
#[pyfunction]
fn preset_names() -> Vec<String> {
    sits_tempo::presets::preset_names()
        .into_iter()
        .map(str::to_string)
        .collect()
}

/// Raw config text of a committed preset.
#[pyfunction]
fn preset_config(name: &str) -> PyResult<String> {
    sits_tempo::presets::preset_text(name)
        .map(str::to_string)
        .map_err(err)
}

/// Names of the grid-search study presets.
#[pyfunction]
fn study_names() -> Vec<String> {
    sits_tempo::harness::STUDY_NAMES
        .iter()
        .map(|s| s.to_string())
        .collect()
}

#[pymodule]
fn sits_tempo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyNormalizer>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainLog>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(preset_names, m)?)?;
    m.add_function(wrap_pyfunction!(preset_config, m)?)?;
    m.add_function(wrap_pyfunction!(study_names, m)?)?;
    Ok(())
}
