//! Dataset ingestion, preprocessing and the synthetic generator.
//!
//! Two published tabular layouts are supported:
//! - one sample per line with 230 numeric fields (23 timestamps x 10
//!   channels) plus a separate label file, one integer per line;
//! - one sample per line with 46 numeric fields and a trailing integer
//!   label (single channel per timestamp).
//!
//! Synthetic datasets serialise to the second layout generalised to `T*C`
//! fields plus label, with a sidecar `<path>.meta` key-value file carrying
//! the shape and generator echo. Class IDs on disk are 1-based; in memory
//! labels are always zero-based.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Channel order of the 10-feature layout: seven surface reflectances then
/// three derived indices.
pub const TISELAC_CHANNELS: [&str; 10] = [
    "Ultra Blue", "Blue", "Green", "Red", "NIR", "SWIR1", "SWIR2", "NDVI", "NDWI", "BI",
];

/// Class names of the 9-class land-cover table, in original ID order 1-9.
pub const TISELAC_CLASSES: [&str; 9] = [
    "Urban Areas",
    "Other built-up surfaces",
    "Forests",
    "Sparse Vegetation",
    "Rocks and bare soil",
    "Grassland",
    "Sugarcane crops",
    "Other crops",
    "Water",
];

/// A set of per-pixel time series with integer labels.
#[derive(Debug, Clone)]
pub struct SitsDataset {
    samples: Tensor,
    labels: Vec<usize>,
    class_names: Vec<String>,
    provenance: String,
}

impl SitsDataset {
    pub fn new(
        samples: Tensor,
        labels: Vec<usize>,
        class_names: Vec<String>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if samples.rank() != 3 {
            return Err(Error::shape("SitsDataset samples", &[0, 0, 0], samples.shape()));
        }
        if samples.shape()[0] != labels.len() {
            return Err(Error::shape(
                "SitsDataset labels",
                &[samples.shape()[0]],
                &[labels.len()],
            ));
        }
        let k = class_names.len();
        for (i, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(Error::ClassOutOfRange { index: i, value: l, classes: k });
            }
        }
        Ok(SitsDataset {
            samples,
            labels,
            class_names,
            provenance: provenance.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn timesteps(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.samples.shape()[2]
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Gather the given rows into a `[len, T, C]` batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let (t, c) = (self.timesteps(), self.channels());
        let row = t * c;
        let mut out = Tensor::zeros(&[indices.len(), t, c]);
        for (bi, &i) in indices.iter().enumerate() {
            out.data_mut()[bi * row..(bi + 1) * row]
                .copy_from_slice(&self.samples.data()[i * row..(i + 1) * row]);
        }
        out
    }

    /// Labels of the given rows.
    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// New dataset holding only the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> SitsDataset {
        SitsDataset {
            samples: self.batch(indices),
            labels: self.batch_labels(indices),
            class_names: self.class_names.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Per-class sample counts.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn split_fields(line: &str) -> Vec<&str> {
    if line.contains(',') {
        line.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
    } else {
        line.split_whitespace().collect()
    }
}

fn parse_numeric_rows(path: &Path, expected_fields: usize) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    let display = path.display().to_string();
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_fields(line);
        if fields.len() != expected_fields {
            return Err(Error::DataFormat {
                path: display,
                row: i + 1,
                message: format!("expected {expected_fields} fields, found {}", fields.len()),
            });
        }
        let mut row = Vec::with_capacity(expected_fields);
        for f in fields {
            row.push(f.parse::<f64>().map_err(|_| Error::DataFormat {
                path: display.clone(),
                row: i + 1,
                message: format!("non-numeric field '{f}'"),
            })?);
        }
        rows.push(row);
    }
    Ok(rows)
}

fn remap_label(raw: f64, k: usize, path: &Path, row: usize) -> Result<usize> {
    let id = raw as i64;
    if raw.fract() != 0.0 || id < 1 || id as usize > k {
        return Err(Error::DataFormat {
            path: path.display().to_string(),
            row,
            message: format!("class id {raw} outside 1..={k}"),
        });
    }
    Ok(id as usize - 1)
}

/// Load the 23x10 reflectance/index layout: row `r` reshapes to `(23, 10)`
/// with `samples[r, t, c] = field[10*t + c]`; labels remap from 1-9 to 0-8.
pub fn load_tiselac(features_path: &Path, labels_path: &Path) -> Result<SitsDataset> {
    let rows = parse_numeric_rows(features_path, 230)?;
    let label_rows = parse_numeric_rows(labels_path, 1)?;
    if rows.len() != label_rows.len() {
        return Err(Error::RowCountMismatch {
            features_path: features_path.display().to_string(),
            features_rows: rows.len(),
            labels_path: labels_path.display().to_string(),
            labels_rows: label_rows.len(),
        });
    }
    let n = rows.len();
    let mut samples = Tensor::zeros(&[n, 23, 10]);
    for (r, row) in rows.iter().enumerate() {
        samples.data_mut()[r * 230..(r + 1) * 230].copy_from_slice(row);
    }
    let mut labels = Vec::with_capacity(n);
    for (r, row) in label_rows.iter().enumerate() {
        labels.push(remap_label(row[0], 9, labels_path, r + 1)?);
    }
    SitsDataset::new(
        samples,
        labels,
        TISELAC_CLASSES.iter().map(|s| s.to_string()).collect(),
        "tiselac",
    )
}

/// Load the single-channel 46-timestamp layout: 46 values plus a trailing
/// class label per row; labels remap from 1-24 to 0-23.
pub fn load_sits_tsi(fold_path: &Path) -> Result<SitsDataset> {
    let rows = parse_numeric_rows(fold_path, 47)?;
    let n = rows.len();
    let mut samples = Tensor::zeros(&[n, 46, 1]);
    let mut labels = Vec::with_capacity(n);
    for (r, row) in rows.iter().enumerate() {
        samples.data_mut()[r * 46..(r + 1) * 46].copy_from_slice(&row[..46]);
        labels.push(remap_label(row[46], 24, fold_path, r + 1)?);
    }
    let class_names = (1..=24).map(|i| format!("Class {i}")).collect();
    SitsDataset::new(samples, labels, class_names, "sits_tsi")
}

// ---- normalisation ---------------------------------------------------------

/// Per-(timestamp, channel) percentile bounds fitted on a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    timesteps: usize,
    channels: usize,
    low: Vec<f64>,
    high: Vec<f64>,
    degenerate: Vec<bool>,
    pub low_percentile: f64,
    pub high_percentile: f64,
}

impl NormalizationStats {
    /// Reassemble stats from stored bounds (degenerate cells re-derived).
    pub fn from_parts(
        timesteps: usize,
        channels: usize,
        low: Vec<f64>,
        high: Vec<f64>,
        low_percentile: f64,
        high_percentile: f64,
    ) -> Self {
        let degenerate = low.iter().zip(&high).map(|(l, h)| l == h).collect();
        NormalizationStats {
            timesteps,
            channels,
            low,
            high,
            degenerate,
            low_percentile,
            high_percentile,
        }
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn low(&self, t: usize, c: usize) -> f64 {
        self.low[t * self.channels + c]
    }

    pub fn high(&self, t: usize, c: usize) -> f64 {
        self.high[t * self.channels + c]
    }

    pub fn is_degenerate(&self, t: usize, c: usize) -> bool {
        self.degenerate[t * self.channels + c]
    }

    pub fn any_degenerate(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }

    /// Stable digest of the fitted bounds, for leakage audits.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for v in self.low.iter().chain(self.high.iter()) {
            hasher.update(v.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut out = String::new();
        for b in digest.iter().take(8) {
            let _ = write!(out, "{b:02x}");
        }
        out
    }
}

/// Percentile under linear interpolation between order statistics: rank
/// `p/100 * (n-1)` interpolated between the two neighbouring sorted values.
pub fn percentile_linear(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = (p / 100.0) * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Fit per-cell percentile bounds on a training split only.
pub fn fit_normalizer(train: &SitsDataset, low_p: f64, high_p: f64) -> Result<NormalizationStats> {
    if train.n() < 2 {
        return Err(Error::Config(format!(
            "normalizer needs at least 2 training samples, got {}",
            train.n()
        )));
    }
    if !(0.0..=100.0).contains(&low_p) || !(0.0..=100.0).contains(&high_p) || low_p >= high_p {
        return Err(Error::Config(format!(
            "invalid percentile pair ({low_p}, {high_p})"
        )));
    }
    let (n, t, c) = (train.n(), train.timesteps(), train.channels());
    let mut low = vec![0.0; t * c];
    let mut high = vec![0.0; t * c];
    let mut degenerate = vec![false; t * c];
    let mut column = vec![0.0; n];
    for ti in 0..t {
        for ci in 0..c {
            for s in 0..n {
                column[s] = train.samples().at(&[s, ti, ci]);
            }
            column.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
            let lo = percentile_linear(&column, low_p);
            let hi = percentile_linear(&column, high_p);
            let cell = ti * c + ci;
            low[cell] = lo;
            high[cell] = hi;
            degenerate[cell] = lo == hi;
        }
    }
    Ok(NormalizationStats {
        timesteps: t,
        channels: c,
        low,
        high,
        degenerate,
        low_percentile: low_p,
        high_percentile: high_p,
    })
}

/// Rescale every cell to `[0,1]` by its fitted bounds, clamping out-of-range
/// values; degenerate cells map to 0.5. The input dataset is unmodified.
pub fn apply_normalizer(ds: &SitsDataset, stats: &NormalizationStats) -> Result<SitsDataset> {
    if ds.timesteps() != stats.timesteps || ds.channels() != stats.channels {
        return Err(Error::shape(
            "apply_normalizer",
            &[stats.timesteps, stats.channels],
            &[ds.timesteps(), ds.channels()],
        ));
    }
    let (n, t, c) = (ds.n(), ds.timesteps(), ds.channels());
    let mut out = ds.clone();
    for s in 0..n {
        for ti in 0..t {
            for ci in 0..c {
                let cell = ti * c + ci;
                let idx = (s * t + ti) * c + ci;
                let v = ds.samples().data()[idx];
                out.samples.data_mut()[idx] = if stats.degenerate[cell] {
                    0.5
                } else {
                    ((v - stats.low[cell]) / (stats.high[cell] - stats.low[cell])).clamp(0.0, 1.0)
                };
            }
        }
    }
    Ok(out)
}

// ---- splitting ---------------------------------------------------------------

/// Deterministic train/val/test partition policy. The test fraction is the
/// remainder `1 - train - val`.
#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, val_fraction: f64, seed: u64, stratified: bool) -> Result<Self> {
        if train_fraction <= 0.0 || val_fraction <= 0.0 {
            return Err(Error::Config("split fractions must be positive".into()));
        }
        if train_fraction + val_fraction > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "split fractions sum to {} > 1",
                train_fraction + val_fraction
            )));
        }
        Ok(SplitSpec {
            train_fraction,
            val_fraction,
            seed,
            stratified,
        })
    }

    fn test_fraction(&self) -> f64 {
        (1.0 - self.train_fraction - self.val_fraction).max(0.0)
    }

    fn active_partitions(&self) -> usize {
        2 + usize::from(self.test_fraction() > 1e-12)
    }
}

/// Exact partition sizes under largest-remainder rounding; ties favour
/// train, then val.
pub fn partition_sizes(n: usize, spec: &SplitSpec) -> (usize, usize, usize) {
    let fracs = [spec.train_fraction, spec.val_fraction, spec.test_fraction()];
    let quotas: Vec<f64> = fracs.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut leftover = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if leftover == 0 {
            break;
        }
        sizes[i] += 1;
        leftover -= 1;
    }
    (sizes[0], sizes[1], sizes[2])
}

/// Split into disjoint, exhaustive train/val/test subsets; deterministic
/// under the spec seed. Stratified mode preserves per-class proportions
/// within one sample per class.
pub fn split(ds: &SitsDataset, spec: &SplitSpec) -> Result<(SitsDataset, SitsDataset, SitsDataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    let mut test_idx = Vec::new();

    if spec.stratified {
        let partitions = spec.active_partitions();
        for class in 0..ds.n_classes() {
            let mut members: Vec<usize> = ds
                .labels()
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == class)
                .map(|(i, _)| i)
                .collect();
            if members.is_empty() {
                continue;
            }
            if members.len() < partitions {
                return Err(Error::Stratification {
                    class: ds.class_names()[class].clone(),
                    count: members.len(),
                    partitions,
                });
            }
            members.shuffle(&mut rng);
            let (n_train, n_val, _) = partition_sizes(members.len(), spec);
            train_idx.extend_from_slice(&members[..n_train]);
            val_idx.extend_from_slice(&members[n_train..n_train + n_val]);
            test_idx.extend_from_slice(&members[n_train + n_val..]);
        }
    } else {
        let mut indices: Vec<usize> = (0..ds.n()).collect();
        indices.shuffle(&mut rng);
        let (n_train, n_val, _) = partition_sizes(ds.n(), spec);
        train_idx.extend_from_slice(&indices[..n_train]);
        val_idx.extend_from_slice(&indices[n_train..n_train + n_val]);
        test_idx.extend_from_slice(&indices[n_train + n_val..]);
    }

    train_idx.sort_unstable();
    val_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((ds.subset(&train_idx), ds.subset(&val_idx), ds.subset(&test_idx)))
}

// ---- one-hot -------------------------------------------------------------------

/// Encode labels as `[N, K]` rows with a single 1 at the label index.
pub fn one_hot(labels: &[usize], k: usize) -> Result<Tensor> {
    let mut out = Tensor::zeros(&[labels.len(), k]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::ClassOutOfRange { index: i, value: l, classes: k });
        }
        out.data_mut()[i * k + l] = 1.0;
    }
    Ok(out)
}

// ---- synthetic generator ---------------------------------------------------------

/// Seasonal profile of one class: per-channel sinusoid parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProfile {
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
    pub baseline: Vec<f64>,
}

/// Generator settings for a synthetic dataset of seasonal profiles.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub timesteps: usize,
    pub channels: usize,
    pub n_samples: usize,
    pub noise_sigma: f64,
    pub proportions: Vec<f64>,
    pub profiles: Vec<ClassProfile>,
    pub seed: u64,
}

impl SynthSpec {
    /// Desk-scale default: 5 well-separated classes over 23 timestamps and
    /// 10 channels, mild noise.
    pub fn desk_default() -> Self {
        SynthSpec::seasonal(5, 23, 10, 2000, 0.1, 7)
    }

    /// Deterministic family of separable seasonal profiles: classes differ
    /// primarily by phase, with small per-channel variation.
    pub fn seasonal(
        classes: usize,
        timesteps: usize,
        channels: usize,
        n_samples: usize,
        noise_sigma: f64,
        seed: u64,
    ) -> Self {
        let profiles = (0..classes)
            .map(|k| {
                let amplitude = (0..channels)
                    .map(|c| 0.3 + 0.05 * ((k + c) % 3) as f64)
                    .collect();
                let phase = (0..channels)
                    .map(|c| std::f64::consts::TAU * k as f64 / classes as f64 + 0.15 * c as f64)
                    .collect();
                let baseline = (0..channels)
                    .map(|c| 0.45 + 0.02 * (c % 4) as f64 + 0.01 * k as f64)
                    .collect();
                ClassProfile { amplitude, phase, baseline }
            })
            .collect();
        SynthSpec {
            classes,
            timesteps,
            channels,
            n_samples,
            noise_sigma,
            proportions: vec![1.0 / classes as f64; classes],
            profiles,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.timesteps == 0 || self.channels == 0 || self.n_samples == 0 {
            return Err(Error::Config("synthetic dimensions must be positive".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise sigma must be >= 0".into()));
        }
        if self.proportions.len() != self.classes || self.profiles.len() != self.classes {
            return Err(Error::Config("per-class settings must cover every class".into()));
        }
        let sum: f64 = self.proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("class proportions sum to {sum}, expected 1")));
        }
        for p in &self.profiles {
            if p.amplitude.len() != self.channels
                || p.phase.len() != self.channels
                || p.baseline.len() != self.channels
            {
                return Err(Error::Config("profile vectors must have one entry per channel".into()));
            }
        }
        Ok(())
    }
}

/// Per-class sample counts under largest-remainder rounding; ties favour
/// lower class indices.
pub fn class_counts(proportions: &[f64], n: usize) -> Vec<usize> {
    let quotas: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut leftover = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    counts
}

/// Generate `x[t] = baseline + amplitude*sin(2*pi*t/T + phase) + N(0, sigma)`
/// per class profile; deterministic under the spec seed.
pub fn synth_generate(spec: &SynthSpec) -> Result<SitsDataset> {
    spec.validate()?;
    let counts = class_counts(&spec.proportions, spec.n_samples);
    let (t, c) = (spec.timesteps, spec.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = StandardNormal;
    let mut samples = Tensor::zeros(&[spec.n_samples, t, c]);
    let mut labels = Vec::with_capacity(spec.n_samples);
    let mut row = 0;
    for (k, &count) in counts.iter().enumerate() {
        let profile = &spec.profiles[k];
        for _ in 0..count {
            for ti in 0..t {
                let angle_base = std::f64::consts::TAU * ti as f64 / t as f64;
                for ci in 0..c {
                    let noise: f64 = if spec.noise_sigma > 0.0 {
                        let z: f64 = normal.sample(&mut rng);
                        spec.noise_sigma * z
                    } else {
                        0.0
                    };
                    let v = profile.baseline[ci]
                        + profile.amplitude[ci] * (angle_base + profile.phase[ci]).sin()
                        + noise;
                    samples.set(&[row, ti, ci], v);
                }
            }
            labels.push(k);
            row += 1;
        }
    }
    let class_names = (1..=spec.classes).map(|i| format!("Synth {i}")).collect();
    SitsDataset::new(samples, labels, class_names, "synthetic")
}

// ---- serialisation ------------------------------------------------------------

/// Write a dataset in the flat `T*C fields + 1-based label` layout with a
/// `<path>.meta` sidecar describing the shape.
pub fn save_dataset(ds: &SitsDataset, path: &Path, extra_meta: &[(String, String)]) -> Result<()> {
    let (t, c) = (ds.timesteps(), ds.channels());
    let mut text = String::new();
    for i in 0..ds.n() {
        for j in 0..t * c {
            if j > 0 {
                text.push(' ');
            }
            let _ = write!(text, "{}", ds.samples().data()[i * t * c + j]);
        }
        let _ = write!(text, " {}", ds.labels()[i] + 1);
        text.push('\n');
    }
    std::fs::write(path, text)?;

    let mut meta = String::new();
    let _ = writeln!(meta, "classes = {}", ds.n_classes());
    let _ = writeln!(meta, "timesteps = {t}");
    let _ = writeln!(meta, "channels = {c}");
    let _ = writeln!(meta, "n_samples = {}", ds.n());
    let _ = writeln!(meta, "provenance = {}", ds.provenance());
    let _ = writeln!(meta, "class_names = {}", ds.class_names().join("|"));
    for (k, v) in extra_meta {
        let _ = writeln!(meta, "{k} = {v}");
    }
    std::fs::write(meta_path(path), meta)?;
    Ok(())
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".meta");
    std::path::PathBuf::from(os)
}

/// Load a dataset written by [`save_dataset`] (sidecar required).
pub fn load_dataset(path: &Path) -> Result<SitsDataset> {
    let meta_file = meta_path(path);
    let meta_text = std::fs::read_to_string(&meta_file)?;
    let mut classes = None;
    let mut timesteps = None;
    let mut channels = None;
    let mut class_names: Option<Vec<String>> = None;
    let mut provenance = String::from("file");
    for line in meta_text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            let (k, v) = (k.trim(), v.trim());
            match k {
                "classes" => classes = v.parse::<usize>().ok(),
                "timesteps" => timesteps = v.parse::<usize>().ok(),
                "channels" => channels = v.parse::<usize>().ok(),
                "class_names" => class_names = Some(v.split('|').map(str::to_string).collect()),
                "provenance" => provenance = v.to_string(),
                _ => {}
            }
        }
    }
    let (k, t, c) = match (classes, timesteps, channels) {
        (Some(k), Some(t), Some(c)) => (k, t, c),
        _ => {
            return Err(Error::DataFormat {
                path: meta_file.display().to_string(),
                row: 0,
                message: "sidecar must define classes, timesteps and channels".into(),
            })
        }
    };
    let rows = parse_numeric_rows(path, t * c + 1)?;
    let n = rows.len();
    let mut samples = Tensor::zeros(&[n, t, c]);
    let mut labels = Vec::with_capacity(n);
    for (r, row) in rows.iter().enumerate() {
        samples.data_mut()[r * t * c..(r + 1) * t * c].copy_from_slice(&row[..t * c]);
        labels.push(remap_label(row[t * c], k, path, r + 1)?);
    }
    let names = class_names.unwrap_or_else(|| (1..=k).map(|i| format!("Class {i}")).collect());
    SitsDataset::new(samples, labels, names, provenance)
}

/// Brute-force 1-nearest-neighbour accuracy of `test` against `train` on raw
/// flattened series; the learnability oracle for synthetic data.
pub fn one_nn_accuracy(train: &SitsDataset, test: &SitsDataset) -> f64 {
    let dim = train.timesteps() * train.channels();
    let mut correct = 0usize;
    for i in 0..test.n() {
        let a = &test.samples().data()[i * dim..(i + 1) * dim];
        let mut best = f64::INFINITY;
        let mut best_label = 0usize;
        for j in 0..train.n() {
            let b = &train.samples().data()[j * dim..(j + 1) * dim];
            let mut d = 0.0;
            for (x, y) in a.iter().zip(b) {
                let diff = x - y;
                d += diff * diff;
                if d >= best {
                    break;
                }
            }
            if d < best {
                best = d;
                best_label = train.labels()[j];
            }
        }
        if best_label == test.labels()[i] {
            correct += 1;
        }
    }
    correct as f64 / test.n() as f64
}
