use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One-hot rows `(N, K)` for integer class labels.
pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    if labels.is_empty() || classes < 2 {
        return Err(Error::Data(format!(
            "one-hot needs at least one label and two classes, got {} labels and {classes} classes",
            labels.len()
        )));
    }
    let mut data = vec![T::zero(); labels.len() * classes];
    for (row, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Data(format!("label {label} out of range for {classes} classes")));
        }
        data[row * classes + label] = T::one();
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Mean categorical cross-entropy over the batch and its gradient with
/// respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    let dims = logits.dims();
    if dims.len() != 2 || labels.dims() != dims {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            left: dims.to_vec(),
            right: labels.dims().to_vec(),
        });
    }
    let (n, k) = (dims[0], dims[1]);
    if k < 2 {
        return Err(Error::InvalidShape(format!("cross-entropy needs at least two classes, got {k}")));
    }
    let inv_n = T::one() / T::lit(n as f64);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(n * k);
    for (row, (z, y)) in logits.data().chunks_exact(k).zip(labels.data().chunks_exact(k)).enumerate() {
        let hot = y.iter().filter(|&&v| v == T::one()).count();
        if hot != 1 || y.iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::Data(format!("label row {row} is not one-hot")));
        }
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        let log_total = total.ln();
        for ((&v, &e), &t) in z.iter().zip(&exps).zip(y) {
            if t == T::one() {
                loss -= v - max - log_total;
            }
            grad.push((e / total - t) * inv_n);
        }
    }
    Ok((loss * inv_n, Tensor::new(dims.to_vec(), grad)?))
}
