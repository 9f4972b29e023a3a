//! Central-difference gradient verification.

use crate::error::{Error, Result};

/// Compares an analytic gradient against central finite differences of a
/// scalar function, coordinate by coordinate.
///
/// `forward` must be a pure, deterministic function of the flat input.
/// Relative error uses `max(|analytic|, |numeric|, 1e-8)` as denominator;
/// the maximum over all coordinates is returned.
pub fn finite_diff_check<F>(forward: F, x: &[f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if analytic.len() != x.len() {
        return Err(Error::Dimension(format!(
            "gradient length {} vs input length {}",
            analytic.len(),
            x.len()
        )));
    }
    let mut probe = x.to_vec();
    let mut max_rel = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let fp = forward(&probe);
        probe[i] = x[i] - eps;
        let fm = forward(&probe);
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "oracle function returned non-finite value near coordinate {}",
                i
            )));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_gradient_function() {
        // f = sum(x): gradient is exactly 1 everywhere.
        let x = vec![0.3, -1.2, 4.0];
        let analytic = vec![1.0; 3];
        let err = finite_diff_check(|v| v.iter().sum(), &x, &analytic, 1e-5).unwrap();
        assert!(err < 1e-9, "rel err {}", err);
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = vec![2.0];
        let err = finite_diff_check(|v| v[0] * v[0], &x, &[3.0], 1e-5).unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn rejects_non_finite_oracle() {
        let x = vec![0.0];
        assert!(finite_diff_check(|v| (v[0]).ln(), &x, &[1.0], 1e-5).is_err());
    }
}
