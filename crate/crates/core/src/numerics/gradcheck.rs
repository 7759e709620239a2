//! Central-difference gradient verification.
//!
//! Everything here runs in `f64`; comparing reverse-mode gradients against
//! finite differences in `f32` would drown real bugs in rounding noise.

/// Central-difference gradient of `f` at `x`: entry k is
/// `(f(x + h e_k) - f(x - h e_k)) / 2h`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for k in 0..x.len() {
        let orig = probe[k];
        probe[k] = orig + h;
        let plus = f(&probe);
        probe[k] = orig - h;
        let minus = f(&probe);
        probe[k] = orig;
        grad[k] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Worst relative error between two gradient vectors, using
/// `|a - f| / max(|a|, |f|, floor)`. The floor keeps near-zero entries from
/// inflating the ratio past what the difference magnitude justifies.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> (f64, usize) {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut worst = 0.0;
    let mut worst_idx = 0;
    for (k, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(floor);
        let rel = (a - n).abs() / denom;
        if rel > worst {
            worst = rel;
            worst_idx = k;
        }
    }
    (worst, worst_idx)
}

/// Checks one differentiable input of a scalar-valued function.
///
/// `f` maps the flattened input to the loss value; `analytic` is the
/// reverse-mode gradient for that input. Returns an error message naming the
/// worst entry when the tolerance is exceeded.
pub fn check_input(
    label: &str,
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    h: f64,
    tol: f64,
) -> Result<f64, String> {
    let numeric = central_diff(f, x, h);
    let (worst, idx) = max_relative_error(analytic, &numeric, 1e-4);
    if worst > tol {
        return Err(format!(
            "{label}: entry {idx} analytic {} vs numeric {} (rel err {worst:.3e} > {tol:.1e})",
            analytic[idx], numeric[idx]
        ));
    }
    Ok(worst)
}
