//! Central finite-difference gradient checking.

use crate::error::{DuetError, Result};

/// Max over coordinates of `|analytic - fd| / max(1, |analytic|)`, where `fd`
/// is the central difference of `f` at `p` with step `h`.
pub fn fd_check(mut f: impl FnMut(&[f64]) -> f64, analytic: &[f64], p: &[f64], h: f64) -> Result<f64> {
    if analytic.len() != p.len() {
        return Err(DuetError::shape(format!(
            "gradient has {} entries, parameter vector {}",
            analytic.len(),
            p.len()
        )));
    }
    let mut x = p.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        x[i] = p[i] + h;
        let up = f(&x);
        x[i] = p[i] - h;
        let down = f(&x);
        x[i] = p[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(DuetError::numeric(format!(
                "objective is not finite around coordinate {i}"
            )));
        }
        let fd = (up - down) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let p = [0.3, -1.2, 2.0, 5.5];
        let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
        let err = fd_check(|x| x.iter().map(|v| v * v).sum(), &g, &p, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn softplus_sum() {
        let p: [f64; 5] = [-3.0, -0.5, 0.0, 0.7, 4.0];
        let g: Vec<f64> = p.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        let f = |x: &[f64]| x.iter().map(|v| v.exp().ln_1p()).sum();
        assert!(fd_check(f, &g, &p, 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn non_finite_objective() {
        let err = fd_check(|x| x[0].ln(), &[1.0], &[0.0], 1e-5).unwrap_err();
        assert!(matches!(err, DuetError::Numeric(_)));
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let err = fd_check(|x| x[0] * x[0], &[0.0], &[1.0], 1e-5).unwrap();
        assert!((err - 2.0).abs() < 1e-6);
    }
}
