//! Central finite differences for checking analytic gradients.

/// Step used by every gradient check in this workspace.
pub const DEFAULT_STEP: f64 = 1e-3;

/// `∂f/∂x_i ≈ (f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate.
pub fn central_difference<F>(mut f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + step;
            let plus = f(&x);
            x[i] = point[i] - step;
            let minus = f(&x);
            x[i] = point[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Largest elementwise relative error between two gradients.
///
/// Each coordinate is scaled by `max(|a_i|, |n_i|, floor)`, where
/// `floor = 1e-3 · max_j |n_j|` keeps coordinates that are numerically zero
/// from dominating. Returns 0 for an all-zero pair.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let scale = numeric
        .iter()
        .chain(analytic)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let floor = 1e-3 * scale;
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let g = central_difference(|v| v[0] * v[0] + 3.0 * v[0] * v[1], &[2.0, -1.0], DEFAULT_STEP);
        assert!((g[0] - 1.0).abs() < 1e-9);
        assert!((g[1] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn relative_error_scales() {
        assert_eq!(max_relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((max_relative_error(&[1.0, 2.0], &[1.0, 2.2]) - 0.2 / 2.2).abs() < 1e-12);
        // tiny coordinates are measured against the floor, not themselves
        assert!(max_relative_error(&[1.0, 1e-12], &[1.0, 2e-12]) < 1e-8);
    }
}
