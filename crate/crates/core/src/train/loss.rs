use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to at least this before taking logs.
pub const CLAMP: f64 = 1e-12;

fn check(probs: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    if probs.rank() != 2 || probs.shape()[0] != labels.len() {
        return Err(Error::shape(format!(
            "{:?} probabilities for {} labels",
            probs.shape(),
            labels.len()
        )));
    }
    let k = probs.shape()[1];
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label { label, classes: k });
    }
    Ok((labels.len(), k))
}

/// Mean categorical cross-entropy and its gradient with respect to `probs`.
/// NaN probabilities propagate into the loss rather than being clamped away.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let (n, k) = check(probs, labels)?;
    let mut loss = 0.0f64;
    let mut grad = Tensor::zeros(probs.shape())?;
    for (i, &label) in labels.iter().enumerate() {
        let p = probs.data()[i * k + label] as f64;
        let p = if p.is_nan() { p } else { p.max(CLAMP) };
        loss -= p.ln();
        grad.data_mut()[i * k + label] = (-1.0 / (p * n as f64)) as f32;
    }
    Ok(((loss / n as f64) as f32, grad))
}

/// Gradient of the mean cross-entropy with respect to the logits feeding a
/// softmax: `(p - onehot) / n`.
pub fn softmax_cross_entropy_grad(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k) = check(probs, labels)?;
    let mut grad = probs.clone();
    for (i, &label) in labels.iter().enumerate() {
        grad.data_mut()[i * k + label] -= 1.0;
    }
    let inv = 1.0 / n as f32;
    Ok(grad.map(|g| g * inv))
}
