use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch with log-sum-exp stabilization.
/// Returns the loss and `(softmax − onehot) / N`.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::shape(format!("{n} logit rows, {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} outside [0, {k})")));
    }
    let mut grad = Tensor::zeros(&[n, k]);
    let mut loss = 0.0;
    for (i, (row, g)) in logits
        .data()
        .chunks(k)
        .zip(grad.data_mut().chunks_mut(k))
        .enumerate()
    {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        loss += lse - row[labels[i]];
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = (v - lse).exp() / n as f64;
        }
        g[labels[i]] -= 1.0 / n as f64;
    }
    let loss = loss / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax cross-entropy"));
    }
    Ok((loss, grad))
}
