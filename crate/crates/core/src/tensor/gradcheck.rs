use super::Tensor;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `gradient(point)` against central differences of `value` around
/// `point`, coordinate by coordinate, and returns the worst relative error.
pub fn finite_diff_check(
    mut value: impl FnMut(&Tensor) -> f64,
    gradient: impl FnOnce(&Tensor) -> Tensor,
    point: &Tensor,
    eps: f64,
) -> f64 {
    let analytic = gradient(point);
    assert_eq!(analytic.shape(), point.shape(), "gradient shape differs from point");
    let mut probe = point.clone();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + eps;
        let plus = value(&probe);
        probe.data_mut()[i] = x0 - eps;
        let minus = value(&probe);
        probe.data_mut()[i] = x0;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    worst
}
