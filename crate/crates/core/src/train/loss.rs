//! Softmax cross-entropy with log-sum-exp stabilization.

use crate::num::Scalar;
use crate::tensor::Tensor4;

/// Mean cross-entropy over a batch of logits shaped `(n, classes, 1, 1)`.
/// Returns the loss and the logits gradient `(softmax − onehot) / n`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor4<T>, labels: &[usize]) -> (T, Tensor4<T>) {
    let s = logits.shape();
    assert_eq!(s.h * s.w, 1, "logits must be collapsed to (n, classes)");
    assert_eq!(s.n, labels.len(), "label count mismatch");
    let classes = s.c;
    let inv_n = T::cast(1.0 / s.n as f64);

    let mut grad = Tensor4::zeros(s);
    let mut loss = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        assert!(label < classes, "label {label} out of range for {classes} classes");
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for &v in row {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln();
        loss += log_denom - (row[label] - max);

        let grow = &mut grad.data_mut()[i * classes..(i + 1) * classes];
        for (j, g) in grow.iter_mut().enumerate() {
            let p = (row[j] - max).exp() / denom;
            let target = if j == label { T::one() } else { T::zero() };
            *g = (p - target) * inv_n;
        }
    }
    (loss * inv_n, grad)
}
