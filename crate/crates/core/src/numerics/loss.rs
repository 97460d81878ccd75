use super::Tensor;
use crate::error::{Error, Result};

/// Mean softmax cross-entropy over a `batch × classes` logit matrix.
///
/// Returns the loss and its gradient `(softmax − onehot) / batch`.
pub fn cross_entropy_with_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (batch, classes) = logits.dims2()?;
    if labels.len() != batch {
        return Err(Error::Input(format!("{} labels for a batch of {batch}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
    }
    let mut grad = Tensor::zeros(&[batch, classes]);
    let mut total = 0.0;
    let inv_batch = 1.0 / batch as f64;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &x in row {
            z += (x - max).exp();
        }
        let log_z = z.ln() + max;
        total += log_z - row[y];
        let g = &mut grad.data_mut()[i * classes..(i + 1) * classes];
        for (gj, &x) in g.iter_mut().zip(row) {
            *gj = (x - log_z).exp() * inv_batch;
        }
        g[y] -= inv_batch;
    }
    Ok((total * inv_batch, grad))
}

/// Index of the largest logit in each row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let (batch, _) = logits.dims2()?;
    Ok((0..batch)
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}
