//! Classification metrics and per-round reports.
//!
//! Precision and recall are computed per class and macro-averaged over the
//! classes that occur in the test set. Zero denominators yield 0, and a class
//! with `precision + recall = 0` has F1 = 0. Micro averaging is available for
//! comparison; for single-label data it collapses to accuracy.

use thiserror::Error;

use crate::model::{Dataset, ModelError, ModelSpec, Params};
use crate::privacy::NoiseReceipt;
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("empty confusion matrix")]
    Empty,
    #[error("tracked index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `counts[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Build from rows of counts; every row must have `rows.len()` entries.
    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let classes = rows.len();
        assert!(rows.iter().all(|r| r.len() == classes), "square matrix expected");
        Self {
            classes,
            counts: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.classes + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        (0..self.classes).map(|p| self.get(class, p)).sum()
    }

    pub fn col_sum(&self, class: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, class)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|k| self.get(k, k)).sum()
    }
}

/// Confusion matrix of `theta` on `test`.
pub fn confusion<T: Scalar>(
    spec: &ModelSpec,
    theta: &Params<T>,
    test: &Dataset<T>,
) -> Result<ConfusionMatrix, EvalError> {
    let mut cm = ConfusionMatrix::new(spec.class_count);
    for ex in test.examples() {
        cm.record(ex.label, spec.predict_class(theta, &ex.features)?);
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Averaging {
    #[default]
    Macro,
    Micro,
}

/// The four headline numbers, in the order they are reported.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MetricsReport {
    /// `(ACC, Precision, Recall, F1)`.
    pub fn as_tuple(&self) -> (f64, f64, f64, f64) {
        (self.accuracy, self.precision, self.recall, self.f1)
    }
}

/// Per-class precision, recall and F1.
pub fn per_class(cm: &ConfusionMatrix) -> Vec<(f64, f64, f64)> {
    (0..cm.classes())
        .map(|k| {
            let tp = cm.get(k, k) as f64;
            let col = cm.col_sum(k);
            let row = cm.row_sum(k);
            let p = if col == 0 { 0.0 } else { tp / col as f64 };
            let r = if row == 0 { 0.0 } else { tp / row as f64 };
            (p, r, harmonic(p, r))
        })
        .collect()
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, EvalError> {
    metrics_with(cm, Averaging::Macro)
}

pub fn metrics_with(cm: &ConfusionMatrix, averaging: Averaging) -> Result<MetricsReport, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::Empty);
    }
    let accuracy = cm.trace() as f64 / total as f64;
    match averaging {
        Averaging::Micro => Ok(MetricsReport {
            accuracy,
            precision: accuracy,
            recall: accuracy,
            f1: accuracy,
        }),
        Averaging::Macro => {
            let present: Vec<(f64, f64, f64)> = per_class(cm)
                .into_iter()
                .enumerate()
                .filter(|(k, _)| cm.row_sum(*k) > 0)
                .map(|(_, prf)| prf)
                .collect();
            let n = present.len() as f64;
            Ok(MetricsReport {
                accuracy,
                precision: present.iter().map(|m| m.0).sum::<f64>() / n,
                recall: present.iter().map(|m| m.1).sum::<f64>() / n,
                f1: present.iter().map(|m| m.2).sum::<f64>() / n,
            })
        }
    }
}

/// Selected coordinates of `theta`, in the order of `indices`.
pub fn trace_parameters<T: Scalar>(theta: &Params<T>, indices: &[usize]) -> Result<Vec<T>, EvalError> {
    indices
        .iter()
        .map(|&i| {
            if i < theta.dim() {
                Ok(theta[i])
            } else {
                Err(EvalError::IndexOutOfRange { index: i, dim: theta.dim() })
            }
        })
        .collect()
}

/// One client's line in a round report.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientRecord {
    pub client_id: u32,
    pub domain: String,
    pub participated: bool,
    pub flagged: bool,
    pub sample_count: u64,
    pub loss_before: f64,
    pub loss_after: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub receipt: Option<NoiseReceipt>,
}

/// Tracked coordinates of one model view: the global model or a domain's view of it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTrace {
    pub tag: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    /// 1-based round number.
    pub round: u32,
    pub learning_rate: f64,
    /// `(domain, loss of the new global model on that domain's held-out split)`.
    pub domain_losses: Vec<(String, f64)>,
    /// Metrics of the new global model on the pooled held-out set.
    pub metrics: MetricsReport,
    pub tracked_indices: Vec<usize>,
    pub param_traces: Vec<ParamTrace>,
    pub clients: Vec<ClientRecord>,
}
