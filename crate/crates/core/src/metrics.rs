//! Classification metrics computed from a confusion matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `matrix[t][p]` counts samples of true class `t` predicted as `p`.
pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if y_true.len() != y_pred.len() {
        return Err(Error::invalid(format!(
            "{} true labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= classes || p >= classes {
            return Err(Error::invalid(format!("label outside 0..{classes}")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

fn class_count(y_true: &[usize], y_pred: &[usize]) -> usize {
    y_true.iter().chain(y_pred).max().map_or(0, |m| m + 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancedAccuracy {
    pub value: f64,
    /// True classes absent from `y_true`; they are left out of the average.
    pub excluded_classes: Vec<usize>,
}

/// Mean per-class recall over classes present in `y_true`.
pub fn balanced_accuracy_detail(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<BalancedAccuracy> {
    let m = confusion_matrix(y_true, y_pred, classes)?;
    let mut recalls = Vec::new();
    let mut excluded = Vec::new();
    for (c, row) in m.iter().enumerate() {
        let support: u64 = row.iter().sum();
        if support == 0 {
            excluded.push(c);
        } else {
            recalls.push(row[c] as f64 / support as f64);
        }
    }
    if recalls.is_empty() {
        return Err(Error::invalid("balanced accuracy of an empty label set"));
    }
    Ok(BalancedAccuracy {
        value: recalls.iter().sum::<f64>() / recalls.len() as f64,
        excluded_classes: excluded,
    })
}

pub fn balanced_accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    balanced_accuracy_detail(y_true, y_pred, class_count(y_true, y_pred)).map(|b| b.value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub per_class: Vec<f64>,
}

/// Per-class F1 with the 0/0 → 0 convention, and its macro and support-weighted means.
pub fn f1_scores_with(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<F1Scores> {
    let m = confusion_matrix(y_true, y_pred, classes)?;
    if y_true.is_empty() {
        return Err(Error::invalid("F1 of an empty label set"));
    }
    let mut per_class = Vec::with_capacity(classes);
    let mut weighted = 0.0;
    for c in 0..classes {
        let tp = m[c][c] as f64;
        let support: u64 = m[c].iter().sum();
        let predicted: u64 = (0..classes).map(|t| m[t][c]).sum();
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let recall = if support == 0 { 0.0 } else { tp / support as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        weighted += f1 * support as f64;
        per_class.push(f1);
    }
    Ok(F1Scores {
        macro_f1: per_class.iter().sum::<f64>() / classes as f64,
        weighted_f1: weighted / y_true.len() as f64,
        per_class,
    })
}

pub fn f1_scores(y_true: &[usize], y_pred: &[usize]) -> Result<F1Scores> {
    f1_scores_with(y_true, y_pred, class_count(y_true, y_pred))
}

/// Everything reported for one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub balanced_accuracy: f64,
    pub f1_macro: f64,
    pub f1_weighted: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub confusion: Vec<Vec<u64>>,
}

impl MetricSet {
    pub fn compute(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<Self> {
        let confusion = confusion_matrix(y_true, y_pred, classes)?;
        let bacc = balanced_accuracy_detail(y_true, y_pred, classes)?;
        let f1 = f1_scores_with(y_true, y_pred, classes)?;
        let mut precision = Vec::with_capacity(classes);
        let mut recall = Vec::with_capacity(classes);
        for c in 0..classes {
            let support: u64 = confusion[c].iter().sum();
            let predicted: u64 = (0..classes).map(|t| confusion[t][c]).sum();
            let tp = confusion[c][c] as f64;
            precision.push(if predicted == 0 { 0.0 } else { tp / predicted as f64 });
            recall.push(if support == 0 { 0.0 } else { tp / support as f64 });
        }
        Ok(Self {
            balanced_accuracy: bacc.value,
            f1_macro: f1.macro_f1,
            f1_weighted: f1.weighted_f1,
            precision,
            recall,
            confusion,
        })
    }
}
