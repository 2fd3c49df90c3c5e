//! Central finite differences, the verification oracle for every hand-written
//! backward pass in the crate.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Gradient of a scalar-valued function by central differences:
/// `(f(x + h·e) - f(x - h·e)) / 2h` per entry.
pub fn finite_diff_grad(
    f: impl Fn(&Matrix) -> f64,
    at: &Matrix,
    h: f64,
) -> Result<Matrix> {
    if h <= 0.0 {
        return Err(Error::InvalidInput(format!("step size h = {h} must be positive")));
    }
    let mut grad = Matrix::zeros(at.rows(), at.cols());
    let mut probe = at.clone();
    for r in 0..at.rows() {
        for c in 0..at.cols() {
            let orig = probe[(r, c)];
            probe[(r, c)] = orig + h;
            let fp = f(&probe);
            probe[(r, c)] = orig - h;
            let fm = f(&probe);
            probe[(r, c)] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "non-finite function value while perturbing entry ({r}, {c})"
                )));
            }
            grad[(r, c)] = (fp - fm) / (2.0 * h);
        }
    }
    Ok(grad)
}

/// Relative error between two gradients, `|a-b| / max(|a|, |b|, floor)`,
/// reduced by max over entries. Shared by tests and the audit command.
pub fn max_rel_err(analytic: &Matrix, numeric: &Matrix) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_entry_sum_is_all_ones() {
        let at = Matrix::from_vec(2, 3, vec![0.3, -1.0, 2.0, 0.0, 5.0, -0.7]).unwrap();
        let g = finite_diff_grad(|m| m.data().iter().sum(), &at, 1e-5).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9, "entry {v}");
        }
    }

    #[test]
    fn gradient_of_half_squared_norm_is_the_point() {
        let at = Matrix::from_vec(2, 2, vec![1.5, -2.0, 0.25, 3.0]).unwrap();
        let g = finite_diff_grad(
            |m| 0.5 * m.data().iter().map(|v| v * v).sum::<f64>(),
            &at,
            1e-5,
        )
        .unwrap();
        // Central differences are exact to O(h^2) on quadratics.
        assert!(g.max_abs_diff(&at) < 1e-9);
    }

    #[test]
    fn nonfinite_function_value_is_reported_with_entry() {
        let at = Matrix::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
        let err = finite_diff_grad(|m| (1.0 / m[(0, 1)]).ln(), &at, 2.0).unwrap_err();
        assert!(err.to_string().contains("(0, 1)"), "got: {err}");
    }

    #[test]
    fn nonpositive_step_is_rejected() {
        let at = Matrix::zeros(1, 1);
        assert!(finite_diff_grad(|_| 0.0, &at, 0.0).is_err());
        assert!(finite_diff_grad(|_| 0.0, &at, -1e-5).is_err());
    }
}
