//! Central finite differences, the independent oracle for tape gradients.

use super::tensor::Tensor;

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * eps));
    }
    Tensor::new(x.shape(), grad).expect("same shape as input")
}

/// Default probe step.
pub const FD_EPS: f64 = 1e-5;

/// Entries smaller than this are compared absolutely rather than relatively.
/// Central-difference roundoff is about `1e-16 · |f| / ε ≈ 1e-10` for the
/// projected losses used here, so a smaller floor turns structurally zero
/// gradients (key biases under softmax) into spurious failures.
pub const REL_ERR_FLOOR: f64 = 1e-5;

/// Largest coordinatewise `|a − n| / max(|a|, |n|, floor)`. NaN anywhere
/// yields NaN so a broken gradient can never look like a pass.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, worst_of)
}

/// `f64::max` that lets NaN win.
pub fn worst_of(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}
