use super::{EvalError, Result};
use crate::tensor::Tensor;

/// Percentage of rows whose label is among the `k` highest scores. Ties
/// rank the lower class index first.
pub fn topk_accuracy(scores: &Tensor<f32>, labels: &[usize], k: usize) -> Result<f64> {
    let [n, c] = *scores.shape() else {
        return Err(EvalError::Invalid(format!(
            "scores must be 2-D, got {:?}",
            scores.shape()
        )));
    };
    if k == 0 || k > c {
        return Err(EvalError::KOutOfRange { k, classes: c });
    }
    if labels.len() != n {
        return Err(EvalError::Invalid(format!(
            "{n} score rows but {} labels",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(EvalError::Empty("score matrix"));
    }
    let mut hits = 0usize;
    for (row, &y) in scores.data().chunks(c).zip(labels) {
        if y >= c {
            return Err(EvalError::LabelOutOfRange {
                label: y,
                classes: c,
            });
        }
        let s = row[y];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > s || (v == s && j < y))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / n as f64)
}

/// Top-1 and top-5 accuracy; top-5 degrades to top-`C` when fewer than five
/// classes exist.
pub fn top1_top5(scores: &Tensor<f32>, labels: &[usize]) -> Result<(f64, f64)> {
    let c = scores.shape().get(1).copied().unwrap_or(0);
    Ok((
        topk_accuracy(scores, labels, 1)?,
        topk_accuracy(scores, labels, c.min(5))?,
    ))
}
