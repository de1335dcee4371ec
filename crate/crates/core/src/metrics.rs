//! Accuracy, macro-F1 and the Adjusted Rand Index.

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("label length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {needed} labels, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
}

fn check_lengths(a: &[usize], b: &[usize], needed: usize) -> Result<usize, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < needed {
        return Err(MetricsError::TooFew {
            needed,
            got: a.len(),
        });
    }
    Ok(a.len())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64, MetricsError> {
    let n = check_lengths(pred, truth, 1)?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / n as f64)
}

/// Unweighted mean of per-class F1 over `0..n_classes`.
///
/// Classes absent from both prediction and truth still count, with F1 = 0.
pub fn macro_f1(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<f64, MetricsError> {
    check_lengths(pred, truth, 1)?;
    if let Some(&label) = pred.iter().chain(truth).find(|&&l| l >= n_classes) {
        return Err(MetricsError::LabelOutOfRange { label, n_classes });
    }
    let mut tp = vec![0usize; n_classes];
    let mut predicted = vec![0usize; n_classes];
    let mut actual = vec![0usize; n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        predicted[p] += 1;
        actual[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let total: f64 = (0..n_classes)
        .map(|c| {
            // F1 = 2PR/(P+R) = 2tp / (predicted + actual)
            let denom = predicted[c] + actual[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / n_classes as f64)
}

fn comb2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand Index from the contingency table.
///
/// When the denominator vanishes the index is 1 for identical partitions and
/// 0 otherwise.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64, MetricsError> {
    let n = check_lengths(a, b, 2)?;
    let mut cells = HashMap::<(usize, usize), usize>::new();
    let mut rows = HashMap::<usize, usize>::new();
    let mut cols = HashMap::<usize, usize>::new();
    for (&x, &y) in a.iter().zip(b) {
        *cells.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }

    let index: f64 = cells.values().map(|&c| comb2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| comb2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| comb2(c)).sum();
    let expected = sum_a * sum_b / comb2(n);
    let max_index = 0.5 * (sum_a + sum_b);
    let denom = max_index - expected;
    if denom == 0.0 {
        // identical partitions put every cluster of `a` in exactly one cluster of `b`
        let same = cells.len() == rows.len() && cells.len() == cols.len();
        return Ok(if same { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / denom)
}
