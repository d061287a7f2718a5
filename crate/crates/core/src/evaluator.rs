//! Confusion matrices, per-class and averaged metrics, classification reports and
//! k-fold cross-validation.

use std::fmt::Write as _;

use barkid_nn::{derive_seed, derive_seed_n, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataset::{kfold_partition, DatasetManifest};
use crate::error::{Error, Result};
use crate::model::{build_model, Classifier, ModelSpec};
use crate::preprocess::{encode_indices, Batch, PreprocessConfig};
use crate::trainer::{train, TrainingConfig};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

pub fn confusion_matrix(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::invalid(format!(
            "{} true labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut counts = vec![vec![0u64; num_classes]; num_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::invalid(format!("class index out of range [0, {num_classes}): true {t}, predicted {p}")));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix {
        counts,
        class_names: (0..num_classes).map(|i| i.to_string()).collect(),
    })
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>, class_names: Vec<String>) -> Result<Self> {
        let c = counts.len();
        if counts.iter().any(|r| r.len() != c) || class_names.len() != c {
            return Err(Error::invalid("confusion matrix must be square with one name per class"));
        }
        Ok(Self { counts, class_names })
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.num_classes() {
            return Err(Error::invalid(format!(
                "{} class names for a {}-class matrix",
                names.len(),
                self.num_classes()
            )));
        }
        self.class_names = names;
        Ok(self)
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn column_sum(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// No predictions of this class: precision reported as 0.
    pub precision_undefined: bool,
    /// No true samples of this class: recall reported as 0.
    pub recall_undefined: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Accuracy and support-weighted precision, recall and F1, in that order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Headline {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
    pub total_support: u64,
    pub headline: Headline,
    pub confusion: ConfusionMatrix,
    /// Footnotes for metrics that hit a zero denominator.
    pub undefined: Vec<String>,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn classification_report(cm: &ConfusionMatrix) -> Result<EvaluationReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("classification report needs at least one sample"));
    }
    let c = cm.num_classes();
    let mut per_class = Vec::with_capacity(c);
    let mut undefined = Vec::new();
    for k in 0..c {
        let tp = cm.counts[k][k];
        let support = cm.row_sum(k);
        let (precision, precision_undefined) = ratio(tp, cm.column_sum(k));
        let (recall, recall_undefined) = ratio(tp, support);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let name = &cm.class_names[k];
        if precision_undefined {
            undefined.push(format!("precision of `{name}` is undefined (no predicted samples) and reported as 0"));
        }
        if recall_undefined {
            undefined.push(format!("recall of `{name}` is undefined (no true samples) and reported as 0"));
        }
        per_class.push(ClassMetrics {
            class_name: name.clone(),
            precision,
            recall,
            f1,
            support,
            precision_undefined,
            recall_undefined,
        });
    }
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / c as f64;
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / total as f64
    };
    let macro_avg = Averages {
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
    };
    let weighted_avg = Averages {
        precision: weighted(|m| m.precision),
        recall: weighted(|m| m.recall),
        f1: weighted(|m| m.f1),
    };
    let accuracy = cm.trace() as f64 / total as f64;
    Ok(EvaluationReport {
        per_class,
        accuracy,
        macro_avg,
        weighted_avg,
        total_support: total,
        headline: Headline {
            accuracy,
            precision: weighted_avg.precision,
            recall: weighted_avg.recall,
            f1: weighted_avg.f1,
        },
        confusion: cm.clone(),
        undefined,
    })
}

impl EvaluationReport {
    /// Fixed-width text table: one row per class, then accuracy, macro avg and
    /// weighted avg, two decimals.
    pub fn to_text(&self) -> String {
        const DIGITS: usize = 2;
        let last_heading = "weighted avg";
        let width = self
            .per_class
            .iter()
            .map(|m| m.class_name.chars().count())
            .max()
            .unwrap_or(0)
            .max(last_heading.len())
            .max(DIGITS);
        let mut out = String::new();
        let _ = writeln!(out, "{:>width$}  {:>9} {:>9} {:>9} {:>9}\n", "", "precision", "recall", "f1-score", "support");
        let row = |out: &mut String, name: &str, p: f64, r: f64, f: f64, s: u64| {
            let _ = writeln!(out, "{name:>width$}  {p:>9.DIGITS$} {r:>9.DIGITS$} {f:>9.DIGITS$} {s:>9}");
        };
        for m in &self.per_class {
            row(&mut out, &m.class_name, m.precision, m.recall, m.f1, m.support);
        }
        out.push('\n');
        let _ = writeln!(
            out,
            "{:>width$}  {:>9} {:>9} {:>9.DIGITS$} {:>9}",
            "accuracy", "", "", self.accuracy, self.total_support
        );
        let (m, w) = (self.macro_avg, self.weighted_avg);
        row(&mut out, "macro avg", m.precision, m.recall, m.f1, self.total_support);
        row(&mut out, last_heading, w.precision, w.recall, w.f1, self.total_support);
        for note in &self.undefined {
            let _ = write!(out, "\n* {note}");
        }
        if !self.undefined.is_empty() {
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    (0..probs.batch())
        .map(|i| {
            let row = probs.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// `trace / total` of the confusion matrix built from the two label lists.
pub fn accuracy(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<f64> {
    let cm = confusion_matrix(truth, predicted, num_classes)?;
    if cm.total() == 0 {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    Ok(cm.trace() as f64 / cm.total() as f64)
}

/// Report for already-computed probability rows against one-hot labels.
pub fn report_from_probabilities(probs: &Tensor, labels: &Tensor, class_names: &[String]) -> Result<EvaluationReport> {
    let c = labels.shape()[1];
    if probs.shape() != labels.shape() {
        return Err(Error::invalid(format!(
            "predictions {:?} do not match labels {:?}",
            probs.shape(),
            labels.shape()
        )));
    }
    let cm = confusion_matrix(&crate::preprocess::one_hot_indices(labels), &argmax_rows(probs), c)?;
    let cm = if class_names.len() == c {
        cm.with_class_names(class_names.to_vec())?
    } else {
        cm
    };
    classification_report(&cm)
}

pub fn evaluate(model: &Classifier, batch: &Batch) -> Result<EvaluationReport> {
    if batch.num_classes() != model.num_classes() {
        return Err(Error::invalid(format!(
            "batch has {} classes but the model predicts {}",
            batch.num_classes(),
            model.num_classes()
        )));
    }
    let probs = model.predict(&batch.inputs)?;
    report_from_probabilities(&probs, &batch.labels, &batch.classes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldAverages {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CVReport {
    pub k: usize,
    pub seed: u64,
    /// Completed folds in fold order.
    pub folds: Vec<FoldResult>,
    /// Means over `folds`; absent when no fold completed.
    pub average: Option<FoldAverages>,
    /// Why the run stopped early, if it did.
    pub aborted: Option<String>,
}

impl CVReport {
    pub fn from_folds(k: usize, seed: u64, folds: Vec<FoldResult>, aborted: Option<String>) -> Self {
        let n = folds.len() as f64;
        let mean = |f: fn(&FoldResult) -> f64| folds.iter().map(f).sum::<f64>() / n;
        let average = (!folds.is_empty()).then(|| FoldAverages {
            accuracy: mean(|f| f.accuracy),
            precision: mean(|f| f.precision),
            recall: mean(|f| f.recall),
            f1: mean(|f| f.f1),
        });
        Self {
            k,
            seed,
            folds,
            average,
            aborted,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.aborted.is_none() && self.folds.len() == self.k
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("cv report serialises");
        s.push('\n');
        s
    }

    /// One row per fold then an `average` row; metric values use shortest
    /// round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["fold", "train_size", "test_size", "accuracy", "precision", "recall", "f1"])
            .expect("in-memory write");
        for f in &self.folds {
            w.write_record([
                (f.fold + 1).to_string(),
                f.train_size.to_string(),
                f.test_size.to_string(),
                f.accuracy.to_string(),
                f.precision.to_string(),
                f.recall.to_string(),
                f.f1.to_string(),
            ])
            .expect("in-memory write");
        }
        if let Some(a) = self.average {
            w.write_record([
                "average".to_string(),
                String::new(),
                String::new(),
                a.accuracy.to_string(),
                a.precision.to_string(),
                a.recall.to_string(),
                a.f1.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// For each fold, train a freshly built model on the other folds and evaluate on
/// the held-out one. A failing fold stops the run; completed folds are kept.
pub fn cross_validate(
    manifest: &DatasetManifest,
    spec: &ModelSpec,
    tconfig: &TrainingConfig,
    preprocess: &PreprocessConfig,
    k: usize,
    seed: u64,
) -> Result<CVReport> {
    let partition = kfold_partition(manifest, k, derive_seed(seed, "kfold"), false)?;
    let all: Vec<usize> = (0..manifest.len()).collect();
    let encoded = encode_indices(manifest, &all, preprocess)?;
    let mut folds = Vec::with_capacity(k);
    for (i, test_idx) in partition.folds.iter().enumerate() {
        let fold_seed = derive_seed_n(derive_seed(seed, "fold"), i as u64);
        let result = (|| -> Result<FoldResult> {
            let train_idx = partition.train_indices(i);
            let mut model = build_model(spec, fold_seed)?;
            model.set_classes(manifest.classes.clone())?;
            let config = TrainingConfig {
                seed: fold_seed,
                ..tconfig.clone()
            };
            let history = train(&mut model, &encoded.select(&train_idx), &config, None)?;
            if history.diverged {
                return Err(Error::invalid(format!("training diverged after {} epochs", history.epochs.len())));
            }
            let report = evaluate(&model, &encoded.select(test_idx))?;
            Ok(FoldResult {
                fold: i,
                train_size: train_idx.len(),
                test_size: test_idx.len(),
                accuracy: report.accuracy,
                precision: report.weighted_avg.precision,
                recall: report.weighted_avg.recall,
                f1: report.weighted_avg.f1,
            })
        })();
        match result {
            Ok(r) => {
                log::info!("fold {}/{k}: accuracy {:.4}", i + 1, r.accuracy);
                folds.push(r);
            }
            Err(e) => {
                log::error!("fold {}/{k} failed: {e}", i + 1);
                return Ok(CVReport::from_folds(k, seed, folds, Some(format!("fold {} failed: {e}", i + 1))));
            }
        }
    }
    Ok(CVReport::from_folds(k, seed, folds, None))
}
