//! Accuracy, per-class and support-weighted F1 from a confusion matrix.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub per_class_f1: Vec<f64>,
    /// rows are true classes, columns predicted classes
    pub confusion: Vec<Vec<usize>>,
    pub support: Vec<usize>,
}

impl Metrics {
    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Result<Self> {
        let c = confusion.len();
        if c == 0 || confusion.iter().any(|r| r.len() != c) {
            return Err(shape_err("confusion matrix must be square and non-empty"));
        }
        let total: usize = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::Invalid("no evaluated utterances".into()));
        }
        let support: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
        let predicted: Vec<usize> = (0..c).map(|j| confusion.iter().map(|r| r[j]).sum()).collect();
        let correct: usize = (0..c).map(|k| confusion[k][k]).sum();
        let per_class_f1: Vec<f64> = (0..c)
            .map(|k| {
                let tp = confusion[k][k] as f64;
                // 2PR / (P + R) == 2 tp / (support + predicted)
                let denom = (support[k] + predicted[k]) as f64;
                if denom == 0.0 {
                    0.0
                } else {
                    2.0 * tp / denom
                }
            })
            .collect();
        let weighted_f1 = per_class_f1
            .iter()
            .zip(&support)
            .map(|(f, &s)| f * s as f64 / total as f64)
            .sum();
        Ok(Self { accuracy: correct as f64 / total as f64, weighted_f1, per_class_f1, confusion, support })
    }

    pub fn total(&self) -> usize {
        self.support.iter().sum()
    }
}

pub fn confusion_matrix(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if truth.len() != predicted.len() {
        return Err(shape_err(format!("{} labels vs {} predictions", truth.len(), predicted.len())));
    }
    let mut m = vec![vec![0; classes]; classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= classes || p >= classes {
            return Err(Error::BadLabel(format!("class {} with {classes} classes", t.max(p))));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

pub fn compute_metrics(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Metrics> {
    Metrics::from_confusion(confusion_matrix(truth, predicted, classes)?)
}
