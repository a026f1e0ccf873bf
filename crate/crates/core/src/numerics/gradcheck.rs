use crate::error::{Error, Result};

pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Gradient-block norm below which [`relative_error`] reports the absolute
/// difference instead.
pub const NOISE_FLOOR: f64 = 1e-8;

/// Central finite-difference gradient of `f` at `theta`.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = f(&x);
        x[i] = orig - eps;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Relative error between an analytic and a numeric gradient block:
/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`.
///
/// Blocks whose norms both sit below [`NOISE_FLOOR`] are compared absolutely.
/// Central differences at ε=1e-5 carry roughly `ulp(loss)/ε ≈ 1e-11` of
/// rounding noise per coordinate, so a structurally zero gradient (attention
/// key biases, for instance) would otherwise score a relative error near 1.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < NOISE_FLOOR {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_grad(|t| t[0] * t[0], &[3.0], DEFAULT_FD_EPS).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], DEFAULT_FD_EPS).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_function_recovers_coefficients() {
        let a = [1.5, -0.25, 3.0, 0.0];
        let f = |t: &[f64]| a.iter().zip(t).map(|(x, y)| x * y).sum::<f64>();
        let g = finite_diff_grad(f, &[0.1, 0.2, -0.3, 7.0], DEFAULT_FD_EPS).unwrap();
        for (gi, ai) in g.iter().zip(&a) {
            assert!((gi - ai).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let r = finite_diff_grad(|t| 1.0 / (t[0] - 1e-5), &[0.0], 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
