use super::Matrix;
use crate::error::{Error, Result};

const PROB_FLOOR: f64 = 1e-12;

/// Row-wise softmax, stabilised by subtracting each row's maximum.
pub fn softmax(logits: &Matrix) -> Result<Matrix> {
    if logits.rows() == 0 || logits.cols() == 0 {
        return Err(Error::invalid("softmax of an empty matrix"));
    }
    logits.ensure_finite("softmax input")?;
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_row_in_place(out.row_mut(r));
    }
    Ok(out)
}

/// Softmax of one finite row, in place. Exponentials are taken in `f32`
/// after the max shift; the normaliser is summed in `f64`.
pub fn softmax_row_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v as f64;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v = (*v as f64 * inv) as f32;
    }
}

/// Mean negative log-likelihood of the true class, with probabilities
/// floored at `1e-12`.
pub fn cross_entropy(probs: &Matrix, labels: &[u32]) -> Result<f64> {
    if probs.rows() != labels.len() {
        return Err(Error::invalid(format!(
            "{} probability rows but {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    if probs.rows() == 0 {
        return Err(Error::invalid("cross-entropy of an empty batch"));
    }
    let c = probs.cols();
    let mut total = 0f64;
    for (row, &y) in probs.row_iter().zip(labels) {
        if y as usize >= c {
            return Err(Error::invalid(format!(
                "label {y} out of range for {c} classes"
            )));
        }
        let s: f64 = row.iter().map(|&p| p as f64).sum();
        if (s - 1.0).abs() > 1e-5 {
            return Err(Error::invalid(format!("probability row sums to {s}")));
        }
        total -= (row[y as usize] as f64).max(PROB_FLOOR).ln();
    }
    Ok(total / probs.rows() as f64)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(scores: &Matrix, labels: &[u32]) -> Result<f64> {
    if scores.rows() != labels.len() {
        return Err(Error::invalid(format!(
            "{} score rows but {} labels",
            scores.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("accuracy over zero samples"));
    }
    let hits = scores
        .row_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y as usize)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}
