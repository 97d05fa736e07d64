//! Central finite differences over flat parameter blocks.
//!
//! This is the independent gradient oracle: it only ever calls the
//! forward closure, never the tape's backward sweep, so agreement between
//! the two is a real check.

/// Central-difference gradients of `f` with step `h`, one block at a time.
pub fn numerical_grad(f: &dyn Fn(&[Vec<f64>]) -> f64, params: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut gp = vec![0.0; params[p].len()];
        for i in 0..params[p].len() {
            let mut plus = params.to_vec();
            plus[p][i] += h;
            let mut minus = params.to_vec();
            minus[p][i] -= h;
            gp[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out.push(gp);
    }
    out
}

/// Relative error with a small-denominator floor, so near-zero gradients
/// are compared absolutely at 1e-4 scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Worst relative error across two parallel gradient slices.
pub fn worst_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0f64, f64::max)
}
