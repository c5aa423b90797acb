use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::softmax_slice;

const PROB_FLOOR: f64 = 1e-12;

/// `-ln q[label]` for a probability vector, with `q` clamped to at least 1e-12.
pub fn cross_entropy<T: Scalar>(q: &[T], label: usize) -> Result<f64> {
    let p = q.get(label).ok_or_else(|| {
        Error::invalid(
            "cross_entropy",
            format!("label {label} out of range for {} classes", q.len()),
        )
    })?;
    Ok(-p.widen().max(PROB_FLOOR).ln())
}

/// Softmax cross-entropy on logits, and its gradient `softmax(z) - onehot`.
pub fn cross_entropy_logits<T: Scalar>(logits: &[T], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::invalid(
            "cross_entropy",
            format!("label {label} out of range for {} classes", logits.len()),
        ));
    }
    let z: Vec<f64> = logits.iter().map(|v| v.widen()).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    let loss = (log_sum - z[label]).max(0.0);
    let mut grad = softmax_slice(&z);
    grad[label] -= 1.0;
    Ok((loss, grad))
}
