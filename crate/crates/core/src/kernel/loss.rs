use super::Tensor;
use crate::error::{Error, Result};

/// Row-wise softmax of a `B×N` matrix, stabilized by subtracting each row max.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (rows, cols) = logits.dims2()?;
    let mut out = Vec::with_capacity(rows * cols);
    for row in logits.rows().take(rows) {
        let max = row_max(row);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / total));
    }
    Ok(Tensor::from_parts(vec![rows, cols], out))
}

/// Mean cross-entropy of `logits: B×N` against class indices, with its gradient
/// `(softmax − onehot)/B`.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    let (rows, cols) = logits.dims2()?;
    if targets.len() != rows {
        return Err(Error::shape(format!("{} targets for {rows} logit rows", targets.len())));
    }
    if rows == 0 {
        return Err(Error::Empty("cross-entropy over an empty batch".into()));
    }
    if let Some(&target) = targets.iter().find(|&&t| t >= cols) {
        return Err(Error::TargetOutOfRange { target, classes: cols });
    }

    let scale = 1.0 / rows as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(rows * cols);
    for (row, &target) in logits.rows().take(rows).zip(targets) {
        let max = row_max(row);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        total += sum.ln() - (row[target] - max);
        grad.extend(exps.iter().enumerate().map(|(j, e)| {
            let p = e / sum;
            let onehot = if j == target { 1.0 } else { 0.0 };
            (p - onehot) * scale
        }));
    }
    Ok((total * scale, Tensor::from_parts(vec![rows, cols], grad)))
}

fn row_max(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}
