//! Numerical kernel shared by every training stage.

pub mod gradcheck;
pub mod matrix;
pub mod mlp;
pub mod optim;
pub mod rng;

pub use gradcheck::fd_check;
pub use matrix::{cosine, dot, matmul, norm, Matrix};
pub use mlp::{Activation, LayerSpec, Mlp, MlpGrads, Tape};
pub use optim::{Adam, SgdConfig, SgdState};
pub use rng::Rng;

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Numerically stable log-sum-exp; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// In-place softmax; returns the normalizer's log.
pub fn softmax_in_place(xs: &mut [f64]) -> f64 {
    let lse = log_sum_exp(xs);
    xs.iter_mut().for_each(|x| *x = (*x - lse).exp());
    lse
}
