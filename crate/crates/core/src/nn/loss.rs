//! Training losses. Each returns the scalar loss and the gradient with
//! respect to the network output.

use super::{Scalar, TensorBatch};
use crate::error::{CoreError, Result};
use ndarray::Array2;

/// Mean squared error over every element of the batch.
pub fn mse<E: Scalar>(pred: &TensorBatch<E>, target: &TensorBatch<E>) -> Result<(f64, TensorBatch<E>)> {
    match (pred, target) {
        (TensorBatch::Nchw(p), TensorBatch::Nchw(t)) => {
            if p.shape() != t.shape() {
                return Err(CoreError::ShapeError("mse shapes disagree".into()));
            }
            let n = p.len() as f64;
            let mut loss = 0.0;
            let mut grad = p.clone();
            ndarray::Zip::from(&mut grad).and(t).for_each(|g, &t| {
                let d = (*g - t).cast_f64();
                loss += d * d;
                *g = E::cast_from(2.0 * d / n);
            });
            Ok((loss / n, TensorBatch::Nchw(grad)))
        }
        (TensorBatch::Nd(p), TensorBatch::Nd(t)) => {
            if p.shape() != t.shape() {
                return Err(CoreError::ShapeError("mse shapes disagree".into()));
            }
            let n = p.len() as f64;
            let mut loss = 0.0;
            let mut grad = p.clone();
            ndarray::Zip::from(&mut grad).and(t).for_each(|g, &t| {
                let d = (*g - t).cast_f64();
                loss += d * d;
                *g = E::cast_from(2.0 * d / n);
            });
            Ok((loss / n, TensorBatch::Nd(grad)))
        }
        _ => Err(CoreError::ShapeError("mse input kinds disagree".into())),
    }
}

/// Row-wise softmax probabilities computed in f64 for stability.
pub fn softmax_rows<E: Scalar>(logits: &Array2<E>) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(logits.raw_dim());
    for (mut orow, row) in out.rows_mut().into_iter().zip(logits.rows()) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.cast_f64()));
        let mut sum = 0.0;
        for (o, v) in orow.iter_mut().zip(row.iter()) {
            *o = (v.cast_f64() - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Multi-class log loss with softmax on logits, averaged over the batch.
/// The gradient is the usual `(softmax - onehot) / batch`.
pub fn softmax_log_loss<E: Scalar>(
    logits: &Array2<E>,
    labels: &[usize],
) -> Result<(f64, Array2<E>)> {
    let n = logits.shape()[0];
    let classes = logits.shape()[1];
    if labels.len() != n {
        return Err(CoreError::ShapeError(format!(
            "{} labels for {} logit rows",
            labels.len(),
            n
        )));
    }
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    let mut grad = Array2::<E>::zeros(logits.raw_dim());
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(CoreError::ShapeError(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let p = probs[(i, label)].max(1e-300);
        loss -= p.ln();
        for j in 0..classes {
            let target = if j == label { 1.0 } else { 0.0 };
            grad[(i, j)] = E::cast_from((probs[(i, j)] - target) / n as f64);
        }
    }
    Ok((loss / n as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn mse_of_equal_tensors_is_zero() {
        let a = TensorBatch::Nd(array![[1.0f64, 2.0], [3.0, 4.0]]);
        let (loss, _) = mse(&a, &a.clone()).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = array![[1.0f64, 2.0, 3.0], [-5.0, 0.0, 5.0]];
        let p = softmax_rows(&logits);
        for row in p.rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_give_uniform_probabilities() {
        let logits = Array2::<f64>::zeros((2, 4));
        let p = softmax_rows(&logits);
        for v in p.iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn log_loss_grad_rows_sum_to_zero() {
        let logits = array![[0.3f64, -0.2, 1.1], [0.0, 0.5, -0.5]];
        let (_, grad) = softmax_log_loss(&logits, &[2, 0]).unwrap();
        for row in grad.rows() {
            let s: f64 = row.iter().map(|v| v.cast_f64()).sum();
            assert!(s.abs() < 1e-12);
        }
    }
}
