//! Negative binomial likelihood in (mean, inverse-dispersion) form.

use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{DuetError, Result};

/// `log P(x | μ, θ)` for the negative binomial with mean `mu` and inverse
/// dispersion `theta` (variance `μ + μ²/θ`).
pub fn nb_loglik(x: f64, mu: f64, theta: f64) -> Result<f64> {
    if !(x.is_finite() && mu.is_finite() && theta.is_finite()) {
        return Err(DuetError::numeric(format!(
            "nb_loglik got non-finite input (x={x}, mu={mu}, theta={theta})"
        )));
    }
    if x < 0.0 || mu <= 0.0 || theta <= 0.0 {
        return Err(DuetError::input(format!(
            "nb_loglik needs x >= 0, mu > 0, theta > 0 (x={x}, mu={mu}, theta={theta})"
        )));
    }
    Ok(nb_loglik_unchecked(x, mu, theta))
}

/// Counts up to this value use finite sums instead of gamma-function differences.
const SMALL_COUNT: f64 = 32.0;

#[inline]
fn is_small_count(x: f64) -> bool {
    x <= SMALL_COUNT && x.fract() == 0.0
}

/// `ln Γ(x+θ) − ln Γ(θ) − ln Γ(x+1)`.
#[inline]
fn log_binom_coef(x: f64, theta: f64) -> f64 {
    if is_small_count(x) {
        let n = x as usize;
        (0..n).map(|k| ((theta + k as f64) / (k as f64 + 1.0)).ln()).sum()
    } else {
        ln_gamma(x + theta) - ln_gamma(theta) - ln_gamma(x + 1.0)
    }
}

/// `ψ(x+θ) − ψ(θ)`.
#[inline]
fn digamma_diff(x: f64, theta: f64) -> f64 {
    if is_small_count(x) {
        (0..x as usize).map(|k| 1.0 / (theta + k as f64)).sum()
    } else {
        digamma(x + theta) - digamma(theta)
    }
}

#[inline]
pub(crate) fn nb_loglik_unchecked(x: f64, mu: f64, theta: f64) -> f64 {
    let log_norm = log_binom_coef(x, theta);
    // θ·log(θ/(θ+μ)) written as −θ·log1p(μ/θ) to stay accurate for large θ
    let zero_term = -theta * (mu / theta).ln_1p();
    let count_term = if x > 0.0 {
        x * (mu.ln() - (theta + mu).ln())
    } else {
        0.0
    };
    log_norm + zero_term + count_term
}

/// Partial derivatives of [`nb_loglik`] with respect to `mu` and `theta`.
#[inline]
pub(crate) fn nb_grad(x: f64, mu: f64, theta: f64) -> (f64, f64) {
    let denom = theta + mu;
    let dmu = x / mu - (x + theta) / denom;
    let dtheta = digamma_diff(x, theta) - (mu / theta).ln_1p() + mu / denom - x / denom;
    (dmu, dtheta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Rng;

    #[test]
    fn geometric_zero() {
        let v = nb_loglik(0.0, 1.0, 1.0).unwrap();
        assert!((v - 0.5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn poisson_limit() {
        let v = nb_loglik(0.0, 1.0, 1e6).unwrap();
        assert!((v + 1.0).abs() < 1e-3, "{v}");
    }

    #[test]
    fn normalizes() {
        let s: f64 = (0..=500).map(|x| nb_loglik(x as f64, 3.0, 2.0).unwrap().exp()).sum();
        assert!((s - 1.0).abs() < 1e-6, "{s}");
    }

    #[test]
    fn normalizes_for_random_parameters() {
        let mut rng = Rng::new(10);
        for _ in 0..10 {
            let mu = rng.uniform_range(0.1, 20.0);
            let theta = rng.uniform_range(0.5, 10.0);
            // truncate once the tail mass is negligible (variance-based cutoff)
            let sd = (mu + mu * mu / theta).sqrt();
            let upper = (mu + 60.0 * sd + 200.0) as usize;
            let s: f64 = (0..=upper).map(|x| nb_loglik(x as f64, mu, theta).unwrap().exp()).sum();
            assert!((s - 1.0).abs() < 1e-8, "mu={mu} theta={theta} sum={s}");
        }
    }

    #[test]
    fn finite_sums_match_gamma_functions() {
        for &theta in &[0.3, 1.0, 7.5, 1e4] {
            for x in 0..=32 {
                let x = x as f64;
                let direct = ln_gamma(x + theta) - ln_gamma(theta) - ln_gamma(x + 1.0);
                assert!((log_binom_coef(x, theta) - direct).abs() < 1e-9 * direct.abs().max(1.0));
                let dd = digamma(x + theta) - digamma(theta);
                assert!((digamma_diff(x, theta) - dd).abs() < 1e-9 * dd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(nb_loglik(f64::NAN, 1.0, 1.0), Err(DuetError::Numeric(_))));
        assert!(matches!(nb_loglik(1.0, 0.0, 1.0), Err(DuetError::Input(_))));
    }

    #[test]
    fn gradient_matches_differences() {
        let h = 1e-6;
        for &(x, mu, th) in &[(0.0, 1.3, 0.7), (4.0, 2.5, 3.0), (17.0, 9.0, 0.4)] {
            let (dmu, dth) = nb_grad(x, mu, th);
            let fmu = (nb_loglik_unchecked(x, mu + h, th) - nb_loglik_unchecked(x, mu - h, th)) / (2.0 * h);
            let fth = (nb_loglik_unchecked(x, mu, th + h) - nb_loglik_unchecked(x, mu, th - h)) / (2.0 * h);
            assert!((dmu - fmu).abs() < 1e-6, "{dmu} {fmu}");
            assert!((dth - fth).abs() < 1e-6, "{dth} {fth}");
        }
    }
}
