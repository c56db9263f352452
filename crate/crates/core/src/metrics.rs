//! Pseudo-label diagnostics, test evaluation and the reporting protocol.

use serde::{Deserialize, Serialize};

use crate::blend::argmax;
use crate::datagen::Labeled;
use crate::error::{Error, Result};
use crate::nn::ModelParams;
use crate::par::{self, Exec};

/// Per-class recall, precision and relative pseudo-label size.
/// `None` marks an undefined ratio (empty denominator).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlStats {
    pub recall: Vec<Option<f64>>,
    pub precision: Vec<Option<f64>>,
    pub rel_size: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlQualityReport {
    /// Over samples whose pseudo-label passed the confidence mask.
    pub masked: PlStats,
    /// Over every unlabeled sample, ignoring the mask.
    pub all: PlStats,
    pub coverage: f64,
}

fn stats(pairs: impl Iterator<Item = (usize, usize)>, k: usize) -> PlStats {
    let mut truth = vec![0u64; k];
    let mut predicted = vec![0u64; k];
    let mut correct = vec![0u64; k];
    for (p, y) in pairs {
        truth[y] += 1;
        predicted[p] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    let ratio = |a: u64, b: u64| (b > 0).then(|| a as f64 / b as f64);
    PlStats {
        recall: (0..k).map(|c| ratio(correct[c], truth[c])).collect(),
        precision: (0..k).map(|c| ratio(correct[c], predicted[c])).collect(),
        rel_size: (0..k).map(|c| ratio(predicted[c], truth[c])).collect(),
    }
}

/// `masked_preds[i] = (predicted class, passed mask)` against hidden labels.
pub fn pl_quality(masked_preds: &[(usize, bool)], hidden_labels: &[usize], k: usize) -> Result<PlQualityReport> {
    if masked_preds.len() != hidden_labels.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            masked_preds.len(),
            hidden_labels.len()
        )));
    }
    if let Some(bad) = masked_preds
        .iter()
        .map(|p| p.0)
        .chain(hidden_labels.iter().copied())
        .find(|&c| c >= k)
    {
        return Err(Error::Input(format!("class {bad} outside 0..{k}")));
    }
    let pairs = || masked_preds.iter().zip(hidden_labels);
    let n_masked = masked_preds.iter().filter(|p| p.1).count();
    Ok(PlQualityReport {
        masked: stats(pairs().filter(|(p, _)| p.1).map(|(p, &y)| (p.0, y)), k),
        all: stats(pairs().map(|(p, &y)| (p.0, y)), k),
        coverage: if masked_preds.is_empty() {
            0.0
        } else {
            n_masked as f64 / masked_preds.len() as f64
        },
    })
}

/// The last `ceil(0.2 K)` classes (the smallest labeled classes).
pub fn minority_classes(k: usize) -> std::ops::Range<usize> {
    let n = (k as f64 * 0.2).ceil() as usize;
    k - n.max(1)..k
}

/// Mean of the defined entries over `classes`, or `None` if none are defined.
pub fn mean_defined(values: &[Option<f64>], classes: std::ops::Range<usize>) -> Option<f64> {
    let v: Vec<f64> = values[classes].iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_acc: Vec<f64>,
    pub overall_acc: f64,
    pub balanced_acc: f64,
    pub minority_acc: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<u64>>,
}

/// Test accuracy of the linear classifier, on EMA-encoder features when
/// `use_ema` is set.
pub fn evaluate(model: &ModelParams, test: &[Labeled], use_ema: bool) -> Result<EvalReport> {
    evaluate_with(Exec::default(), model, test, use_ema)
}

pub fn evaluate_with(exec: Exec, model: &ModelParams, test: &[Labeled], use_ema: bool) -> Result<EvalReport> {
    let k = model.num_classes();
    let preds = par::map(exec, test, |s| {
        model.forward(&s.x, use_ema).map(|(_, logits)| argmax(&logits))
    });
    let mut confusion = vec![vec![0u64; k]; k];
    for (p, s) in preds.into_iter().zip(test) {
        if s.y >= k {
            return Err(Error::Input(format!("test label {} outside 0..{k}", s.y)));
        }
        confusion[s.y][p?] += 1;
    }
    let per_class_acc: Vec<f64> = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: u64 = row.iter().sum();
            if n == 0 {
                0.0
            } else {
                row[c] as f64 / n as f64
            }
        })
        .collect();
    let total: u64 = confusion.iter().flatten().sum();
    let trace: u64 = (0..k).map(|c| confusion[c][c]).sum();
    let minority = minority_classes(k);
    let n_min = minority.len() as f64;
    Ok(EvalReport {
        overall_acc: if total == 0 { 0.0 } else { trace as f64 / total as f64 },
        balanced_acc: per_class_acc.iter().sum::<f64>() / k as f64,
        minority_acc: per_class_acc[minority].iter().sum::<f64>() / n_min,
        per_class_acc,
        confusion,
    })
}

/// Median of the final `min(k, len)` entries.
pub fn median_last_k(history: &[f64], k: usize) -> Result<f64> {
    if history.is_empty() || k == 0 {
        return Err(Error::Input("median of an empty history".into()));
    }
    let mut tail = history[history.len().saturating_sub(k)..].to_vec();
    tail.sort_by(f64::total_cmp);
    let n = tail.len();
    Ok(if n % 2 == 1 {
        tail[n / 2]
    } else {
        (tail[n / 2 - 1] + tail[n / 2]) / 2.0
    })
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
