//! Confusion-matrix based evaluation: overall accuracy, F1, per-class
//! recall, and the full report with serialisers.
//!
//! All metrics derive from one confusion matrix; rows are true classes,
//! columns predictions. "Per-class accuracy" is per-class recall (diagonal
//! over row sum). F1 is emitted in both weighted (default report value) and
//! macro averaging; classes with zero support and zero predictions
//! contribute zero under macro and weight zero under weighted.

use std::fmt::Write as _;

use crate::data::SitsDataset;
use crate::error::{Error, Result};
use crate::models::Model;

/// K x K contingency counts; `counts[true][pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
    class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn from_predictions(preds: &[usize], labels: &[usize], k: usize) -> Result<Self> {
        let names = (1..=k).map(|i| format!("Class {i}")).collect();
        ConfusionMatrix::from_predictions_named(preds, labels, names)
    }

    pub fn from_predictions_named(
        preds: &[usize],
        labels: &[usize],
        class_names: Vec<String>,
    ) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::shape("confusion_matrix", &[labels.len()], &[preds.len()]));
        }
        let k = class_names.len();
        let mut counts = vec![0u64; k * k];
        for (i, (&p, &y)) in preds.iter().zip(labels).enumerate() {
            if y >= k {
                return Err(Error::ClassOutOfRange { index: i, value: y, classes: k });
            }
            if p >= k {
                return Err(Error::ClassOutOfRange { index: i, value: p, classes: k });
            }
            counts[y * k + p] += 1;
        }
        Ok(ConfusionMatrix { k, counts, class_names })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn at(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.k + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.at(i, i)).sum()
    }

    pub fn row_sum(&self, true_class: usize) -> u64 {
        (0..self.k).map(|p| self.at(true_class, p)).sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        (0..self.k).map(|y| self.at(y, predicted)).sum()
    }

    /// Merge counts from another matrix over the same classes; order
    /// independent, used when evaluation is sharded.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::shape("confusion merge", &[self.k], &[other.k]));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for name in &self.class_names {
            let _ = write!(out, ",{name}");
        }
        out.push('\n');
        for y in 0..self.k {
            let _ = write!(out, "{}", self.class_names[y]);
            for p in 0..self.k {
                let _ = write!(out, ",{}", self.at(y, p));
            }
            out.push('\n');
        }
        out
    }
}

/// Build the matrix from raw predictions.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    ConfusionMatrix::from_predictions(preds, labels, k)
}

/// `100 * trace / total`, undefined on an empty matrix.
pub fn overall_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::UndefinedMetric("overall accuracy of zero samples".into()));
    }
    Ok(100.0 * cm.trace() as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum F1Mode {
    Macro,
    Weighted,
}

fn per_class_f1(cm: &ConfusionMatrix, class: usize) -> f64 {
    let tp = cm.at(class, class) as f64;
    let predicted = cm.col_sum(class) as f64;
    let actual = cm.row_sum(class) as f64;
    if predicted == 0.0 && actual == 0.0 {
        return 0.0;
    }
    let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
    let recall = if actual > 0.0 { tp / actual } else { 0.0 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Averaged F1 as a percentage.
pub fn f1_score(cm: &ConfusionMatrix, mode: F1Mode) -> Result<f64> {
    if cm.total() == 0 {
        return Err(Error::UndefinedMetric("F1 of zero samples".into()));
    }
    match mode {
        F1Mode::Macro => {
            let sum: f64 = (0..cm.k()).map(|c| per_class_f1(cm, c)).sum();
            Ok(100.0 * sum / cm.k() as f64)
        }
        F1Mode::Weighted => {
            let mut weighted = 0.0;
            let mut support = 0.0;
            for c in 0..cm.k() {
                let s = cm.row_sum(c) as f64;
                weighted += s * per_class_f1(cm, c);
                support += s;
            }
            Ok(100.0 * weighted / support)
        }
    }
}

/// Per-class recall percentages; `None` marks classes with no true samples
/// (displayed as a dash and excluded from aggregates).
pub fn per_class_accuracy(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.k())
        .map(|c| {
            let actual = cm.row_sum(c);
            if actual == 0 {
                None
            } else {
                Some(100.0 * cm.at(c, c) as f64 / actual as f64)
            }
        })
        .collect()
}

/// Metrics of one model over one dataset.
#[derive(Debug, Clone)]
pub struct EvaluationReport {
    pub overall_accuracy: f64,
    /// Support-weighted F1, the headline value.
    pub f1_weighted: f64,
    pub f1_macro: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
    pub n_samples: usize,
    pub train_time_seconds: Option<f64>,
}

impl EvaluationReport {
    pub fn from_confusion(cm: ConfusionMatrix, train_time_seconds: Option<f64>) -> Result<Self> {
        Ok(EvaluationReport {
            overall_accuracy: overall_accuracy(&cm)?,
            f1_weighted: f1_score(&cm, F1Mode::Weighted)?,
            f1_macro: f1_score(&cm, F1Mode::Macro)?,
            per_class_accuracy: per_class_accuracy(&cm),
            n_samples: cm.total() as usize,
            confusion: cm,
            train_time_seconds,
        })
    }

    pub fn to_markdown(&self, method: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "| Method | OA | F1 |");
        let _ = writeln!(out, "|---|---|---|");
        let _ = writeln!(
            out,
            "| {method} | {:.1} | {:.1} |",
            self.overall_accuracy, self.f1_weighted
        );
        out.push('\n');
        let _ = writeln!(out, "| Class | Accuracy |");
        let _ = writeln!(out, "|---|---|");
        for (name, acc) in self.confusion.class_names().iter().zip(&self.per_class_accuracy) {
            match acc {
                Some(a) => {
                    let _ = writeln!(out, "| {name} | {a:.2} |");
                }
                None => {
                    let _ = writeln!(out, "| {name} | \u{2014} |");
                }
            }
        }
        out
    }

    pub fn to_csv(&self, method: &str) -> String {
        let mut out = String::from("method,n_samples,oa,f1_weighted,f1_macro,train_seconds\n");
        let _ = writeln!(
            out,
            "{method},{},{:.4},{:.4},{:.4},{}",
            self.n_samples,
            self.overall_accuracy,
            self.f1_weighted,
            self.f1_macro,
            self.train_time_seconds.map_or(String::new(), |t| format!("{t:.3}")),
        );
        out
    }
}

/// Batched eval-mode predictions over `ds`, then all metrics. Deterministic,
/// invariant to batch size and sample order, and mutates nothing.
pub fn evaluate(model: &mut Model, ds: &SitsDataset, batch_size: usize) -> Result<EvaluationReport> {
    if batch_size == 0 {
        return Err(Error::Config("evaluation batch size must be >= 1".into()));
    }
    let (t, c) = model.input_signature();
    if ds.timesteps() != t || ds.channels() != c {
        return Err(Error::shape(
            "evaluate dataset vs model signature",
            &[t, c],
            &[ds.timesteps(), ds.channels()],
        ));
    }
    if ds.n_classes() != model.n_classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            ds.n_classes(),
            model.n_classes()
        )));
    }
    let indices: Vec<usize> = (0..ds.n()).collect();
    let mut preds = Vec::with_capacity(ds.n());
    for chunk in indices.chunks(batch_size) {
        let batch = ds.batch(chunk);
        preds.extend(model.predict(&batch)?);
    }
    let cm = ConfusionMatrix::from_predictions_named(&preds, ds.labels(), ds.class_names().to_vec())?;
    EvaluationReport::from_confusion(cm, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};
    use crate::models::{Model, ModelConfig, TemporalCnnConfig};

    fn hand_case() -> ConfusionMatrix {
        // preds [0,1,1] against labels [0,1,0].
        confusion_matrix(&[0, 1, 1], &[0, 1, 0], 2).unwrap()
    }

    #[test]
    fn confusion_examples() {
        let perfect = confusion_matrix(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        for y in 0..3 {
            for p in 0..3 {
                assert_eq!(perfect.at(y, p), u64::from(y == p));
            }
        }

        let cm = hand_case();
        assert_eq!(
            (cm.at(0, 0), cm.at(0, 1), cm.at(1, 0), cm.at(1, 1)),
            (1, 1, 0, 1)
        );

        let empty = confusion_matrix(&[], &[], 2).unwrap();
        assert_eq!(empty.total(), 0);
        assert!(matches!(overall_accuracy(&empty), Err(Error::UndefinedMetric(_))));
        assert!(f1_score(&empty, F1Mode::Macro).is_err());

        assert!(matches!(
            confusion_matrix(&[5], &[0], 2),
            Err(Error::ClassOutOfRange { index: 0, value: 5, .. })
        ));
    }

    #[test]
    fn overall_accuracy_examples() {
        let perfect = confusion_matrix(&[0, 1, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!(overall_accuracy(&perfect).unwrap(), 100.0);
        assert!((overall_accuracy(&hand_case()).unwrap() - 66.67).abs() < 0.01);
    }

    #[test]
    fn f1_examples() {
        let perfect = confusion_matrix(&[0, 1], &[0, 1], 2).unwrap();
        assert_eq!(f1_score(&perfect, F1Mode::Macro).unwrap(), 100.0);
        assert_eq!(f1_score(&perfect, F1Mode::Weighted).unwrap(), 100.0);

        let cm = hand_case();
        assert!((f1_score(&cm, F1Mode::Macro).unwrap() - 66.67).abs() < 0.01);

        // Weighted F1 sits inside the per-class F1 range.
        let skewed = confusion_matrix(&[0, 0, 0, 1, 1, 0], &[0, 0, 0, 1, 1, 1], 2).unwrap();
        let per: Vec<f64> = (0..2).map(|c| 100.0 * per_class_f1(&skewed, c)).collect();
        let weighted = f1_score(&skewed, F1Mode::Weighted).unwrap();
        let lo = per.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = per.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(weighted >= lo - 1e-9 && weighted <= hi + 1e-9);
    }

    #[test]
    fn per_class_accuracy_examples() {
        let diag = confusion_matrix(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert!(per_class_accuracy(&diag).iter().all(|a| *a == Some(100.0)));

        let cm = hand_case();
        let acc = per_class_accuracy(&cm);
        assert_eq!(acc[0], Some(50.0));
        assert_eq!(acc[1], Some(100.0));

        // A class with no true samples is undefined.
        let sparse = confusion_matrix(&[0, 0], &[0, 0], 2).unwrap();
        assert_eq!(per_class_accuracy(&sparse)[1], None);
        let report = EvaluationReport::from_confusion(sparse, None).unwrap();
        assert!(report.to_markdown("m").contains('\u{2014}'));
    }

    #[test]
    fn relabeling_permutation_preserves_oa() {
        let preds = vec![0usize, 1, 2, 1, 0, 2, 2];
        let labels = vec![0usize, 1, 1, 1, 2, 2, 2];
        let oa = overall_accuracy(&confusion_matrix(&preds, &labels, 3).unwrap()).unwrap();
        // Apply the cycle 0->2, 1->0, 2->1 consistently to both.
        let perm = [2usize, 0, 1];
        let preds_p: Vec<usize> = preds.iter().map(|&p| perm[p]).collect();
        let labels_p: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        let oa_p = overall_accuracy(&confusion_matrix(&preds_p, &labels_p, 3).unwrap()).unwrap();
        assert!((oa - oa_p).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_consistent_with_raw_predictions() {
        let preds = vec![0usize, 1, 2, 1, 0, 2, 1, 0];
        let labels = vec![0usize, 1, 1, 1, 2, 2, 0, 0];
        let cm = confusion_matrix(&preds, &labels, 3).unwrap();
        let oa = overall_accuracy(&cm).unwrap();
        let direct =
            100.0 * preds.iter().zip(&labels).filter(|(p, y)| p == y).count() as f64 / preds.len() as f64;
        assert!((oa - direct).abs() < 1e-9);

        let report = EvaluationReport::from_confusion(cm.clone(), Some(1.5)).unwrap();
        assert!((report.overall_accuracy - 100.0 * cm.trace() as f64 / cm.total() as f64).abs() < 1e-9);
        for k in 0..3 {
            if let Some(acc) = report.per_class_accuracy[k] {
                assert!((acc - 100.0 * cm.at(k, k) as f64 / cm.row_sum(k) as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn merge_is_summation() {
        let a = confusion_matrix(&[0, 1], &[0, 1], 2).unwrap();
        let b = confusion_matrix(&[1, 1], &[0, 1], 2).unwrap();
        let mut merged = a.clone();
        merged.merge(&b).unwrap();
        assert_eq!(merged.total(), 4);
        assert_eq!(merged.at(0, 1), 1);
    }

    #[test]
    fn evaluate_is_batch_size_and_order_invariant() {
        let ds = synth_generate(&SynthSpec::seasonal(3, 10, 3, 40, 0.1, 21)).unwrap();
        let cfg = ModelConfig::TemporalCnn(TemporalCnnConfig {
            nb_conv_layers: 2,
            nb_conv_units: 6,
            nb_fc_units: 8,
            filter_size: 3,
            dropout: 0.1,
        });
        let mut model = Model::build(&cfg, 10, 3, 3, 17).unwrap();

        let before: Vec<Vec<f64>> = model.params().iter().map(|(_, p)| p.value.data().to_vec()).collect();
        let r32 = evaluate(&mut model, &ds, 32).unwrap();
        let r7 = evaluate(&mut model, &ds, 7).unwrap();
        assert_eq!(r32.overall_accuracy.to_bits(), r7.overall_accuracy.to_bits());
        assert_eq!(r32.confusion, r7.confusion);

        // Shuffled sample order leaves the report unchanged.
        let mut order: Vec<usize> = (0..ds.n()).collect();
        order.reverse();
        let shuffled = ds.subset(&order);
        let rs = evaluate(&mut model, &shuffled, 32).unwrap();
        assert_eq!(rs.confusion, r32.confusion);

        // Nothing mutated: parameters and running stats are bit-identical.
        let after: Vec<Vec<f64>> = model.params().iter().map(|(_, p)| p.value.data().to_vec()).collect();
        assert_eq!(before, after);
    }
}
