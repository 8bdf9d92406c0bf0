//! Finite-difference helpers for checking analytic gradients.

/// Central difference `(f(h) - f(-h)) / 2h` of a scalar function of a step.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|, tiny)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}

/// Compare an analytic gradient to central differences on a subset of
/// coordinates. `loss` maps a parameter vector to a scalar.
pub fn check_gradient(
    mut loss: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    grad: &[f64],
    coords: &[usize],
    h: f64,
) -> f64 {
    let mut x = x0.to_vec();
    let numeric: Vec<f64> = coords
        .iter()
        .map(|&c| {
            let orig = x[c];
            x[c] = orig + h;
            let fp = loss(&x);
            x[c] = orig - h;
            let fm = loss(&x);
            x[c] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect();
    let analytic: Vec<f64> = coords.iter().map(|&c| grad[c]).collect();
    relative_error(&analytic, &numeric)
}
