//! Central finite differences, the reference every analytic gradient is checked against.

use super::LossModel;

/// Step used by the gradient checks throughout the crate.
pub const DEFAULT_EPS: f64 = 1e-5;

/// `(L(p + eps e_i) - L(p - eps e_i)) / 2 eps` for every coordinate, using the
/// deterministic loss.
pub fn finite_diff_gradient<M: LossModel + ?Sized>(model: &M, params: &[f64], batch: &[M::Sample], eps: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + eps;
            let plus = model.evaluate(&p, batch);
            p[i] = orig - eps;
            let minus = model.evaluate(&p, batch);
            p[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// `max_i |a_i - n_i| / max(1, |n_i|)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}
