//! Finite-difference gradient oracle.
//!
//! Every gradient acceptance test in the workspace compares analytic adjoints
//! against central differences computed here. This module deliberately knows
//! nothing about [`super::Graph`] internals.

use super::array::Tensor;

/// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps), per coordinate.
///
/// `f` must be deterministic; a NaN from `f` propagates into the result.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "finite_diff_grad needs eps > 0");
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (hi - lo) / (2.0 * eps);
    }
    grad
}

/// Relative error between two gradient vectors: ||a - b|| / max(||a||, ||b||, floor).
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error shape mismatch");
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}
