//! Central-difference helpers used to verify analytic gradients.

/// Central finite differences of a scalar function at `point`.
pub fn central_diff<G>(mut f: G, point: &[f64], step: f64) -> Vec<f64>
where
    G: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    let mut grads = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + step;
        let fp = f(&x);
        x[i] = orig - step;
        let fm = f(&x);
        x[i] = orig;
        grads.push((fp - fm) / (2.0 * step));
    }
    grads
}

/// Relative error with a small-denominator guard: values whose magnitudes
/// both fall below `tiny` are considered equal.
pub fn rel_err(a: f64, b: f64, tiny: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < tiny {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Maximum pairwise relative error between two gradient vectors.
pub fn max_rel_err(a: &[f64], b: &[f64], tiny: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| rel_err(x, y, tiny))
        .fold(0.0, f64::max)
}
