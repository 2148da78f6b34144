//! Variational deconvolution of spot counts into cell-type abundances.
//!
//! `y_sg ~ NB(d_s · Σ_t w_st · M_gt, α_g)` with independent log-normal
//! posteriors over every `w_st` and `d_s` and standard log-normal priors.
//! The ELBO is estimated with one reparameterized sample per step; the KL to
//! the prior is analytic in log space. Per-gene dispersions are point
//! estimates.

use serde::{Deserialize, Serialize};

use super::nb::{nb_grad, nb_loglik_unchecked};
use super::POSITIVE_FLOOR;
use crate::data::CountMatrix;
use crate::error::{DuetError, Result};
use crate::kernel::{sigmoid, softplus, softplus_inv, Adam, Matrix, Rng};

/// `Φ⁻¹(0.05)`.
pub const NORMAL_Q05: f64 = -1.644_853_626_951_472_2;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeconvConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for DeconvConfig {
    fn default() -> Self {
        Self { epochs: 3000, lr: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeconvPosterior {
    /// S×T posterior means `E[w_st] = exp(loc + σ²/2)`.
    pub w_mean: Matrix,
    pub w_loc: Matrix,
    pub w_logstd: Matrix,
    pub detect_loc: Vec<f64>,
    pub detect_logstd: Vec<f64>,
    pub dispersion: Vec<f64>,
    /// S×T 5% quantiles `exp(loc + σ·Φ⁻¹(0.05))`.
    pub w_q05: Matrix,
}

impl DeconvPosterior {
    fn from_params(p: &DeconvParams<'_>, s_n: usize, t_n: usize) -> Self {
        let w_loc = Matrix::from_vec(s_n, t_n, p.w_loc.to_vec()).expect("shape");
        let w_logstd = Matrix::from_vec(s_n, t_n, p.w_ls.to_vec()).expect("shape");
        let w_mean = Matrix::from_fn(s_n, t_n, |s, t| {
            let sd = w_logstd.get(s, t).exp();
            (w_loc.get(s, t) + 0.5 * sd * sd).exp()
        });
        let w_q05 = Matrix::from_fn(s_n, t_n, |s, t| {
            (w_loc.get(s, t) + w_logstd.get(s, t).exp() * NORMAL_Q05).exp()
        });
        Self {
            w_mean,
            w_loc,
            w_logstd,
            detect_loc: p.d_loc.to_vec(),
            detect_logstd: p.d_ls.to_vec(),
            dispersion: p.alpha_raw.iter().map(|&r| softplus(r) + POSITIVE_FLOOR).collect(),
            w_q05,
        }
    }

    /// Posterior-mean abundances normalized to proportions per spot.
    pub fn proportions(&self) -> Matrix {
        row_normalize(&self.w_mean)
    }

    /// 5% quantiles normalized per spot.
    pub fn q05_normalized(&self) -> Matrix {
        row_normalize(&self.w_q05)
    }
}

pub(crate) fn row_normalize(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for s in 0..out.rows() {
        let row = out.row_mut(s);
        let tot: f64 = row.iter().sum();
        if tot > 0.0 {
            row.iter_mut().for_each(|x| *x /= tot);
        } else {
            let k = row.len() as f64;
            row.iter_mut().for_each(|x| *x = 1.0 / k);
        }
    }
    out
}

struct DeconvParams<'a> {
    w_loc: &'a [f64],
    w_ls: &'a [f64],
    d_loc: &'a [f64],
    d_ls: &'a [f64],
    alpha_raw: &'a [f64],
}

fn split(p: &[f64], s_n: usize, t_n: usize) -> DeconvParams<'_> {
    let st = s_n * t_n;
    let (w_loc, rest) = p.split_at(st);
    let (w_ls, rest) = rest.split_at(st);
    let (d_loc, rest) = rest.split_at(s_n);
    let (d_ls, alpha_raw) = rest.split_at(s_n);
    DeconvParams {
        w_loc,
        w_ls,
        d_loc,
        d_ls,
        alpha_raw,
    }
}

/// Negative single-sample ELBO per spot, for fixed reparameterization noise.
pub struct ElboObjective<'a> {
    counts: &'a CountMatrix,
    signature: &'a Matrix,
}

/// Standard-normal noise for one ELBO sample: S×T for abundances, S for detection.
#[derive(Debug, Clone)]
pub struct ElboNoise {
    pub w: Vec<f64>,
    pub d: Vec<f64>,
}

impl ElboNoise {
    pub fn draw(rng: &mut Rng, s_n: usize, t_n: usize) -> Self {
        Self {
            w: (0..s_n * t_n).map(|_| rng.normal()).collect(),
            d: (0..s_n).map(|_| rng.normal()).collect(),
        }
    }
}

impl<'a> ElboObjective<'a> {
    pub fn new(counts: &'a CountMatrix, signature: &'a Matrix) -> Result<Self> {
        if counts.cols() != signature.rows() {
            return Err(DuetError::input(format!(
                "spot counts cover {} panel genes but the signature has {} genes",
                counts.cols(),
                signature.rows()
            )));
        }
        if signature.cols() == 0 {
            return Err(DuetError::input("signature has no cell types"));
        }
        if let Some(v) = signature.data().iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
            return Err(DuetError::input(format!(
                "signature entries must be positive and finite, found {v}"
            )));
        }
        Ok(Self { counts, signature })
    }

    fn dims(&self) -> (usize, usize, usize) {
        (self.counts.rows(), self.signature.cols(), self.counts.cols())
    }

    pub fn n_params(&self) -> usize {
        let (s, t, g) = self.dims();
        2 * s * t + 2 * s + g
    }

    /// Starting point: equal abundances matching each spot's library size,
    /// detection one, narrow posteriors, unit dispersion.
    pub fn init_params(&self) -> Vec<f64> {
        let (s_n, t_n, g_n) = self.dims();
        let sig_total: f64 = self.signature.data().iter().sum();
        let mut p = Vec::with_capacity(self.n_params());
        for s in 0..s_n {
            let lib: f64 = self.counts.row(s).iter().map(|&x| x as f64).sum();
            let w0 = (lib / sig_total).max(1e-2);
            p.extend(std::iter::repeat_n(w0.ln(), t_n));
        }
        p.extend(std::iter::repeat_n((0.1f64).ln(), s_n * t_n));
        p.extend(std::iter::repeat_n(0.0, s_n));
        p.extend(std::iter::repeat_n((0.1f64).ln(), s_n));
        p.extend(std::iter::repeat_n(softplus_inv(1.0), g_n));
        p
    }

    pub fn value(&self, p: &[f64], noise: &ElboNoise) -> f64 {
        self.eval(p, noise, false).0
    }

    pub fn value_and_grad(&self, p: &[f64], noise: &ElboNoise) -> (f64, Vec<f64>) {
        self.eval(p, noise, true)
    }

    fn eval(&self, p: &[f64], noise: &ElboNoise, want_grad: bool) -> (f64, Vec<f64>) {
        let (s_n, t_n, g_n) = self.dims();
        let st = s_n * t_n;
        let q = split(p, s_n, t_n);
        let alpha: Vec<f64> = q.alpha_raw.iter().map(|&r| softplus(r) + POSITIVE_FLOOR).collect();
        let mut grad = if want_grad { vec![0.0; p.len()] } else { Vec::new() };
        let mut dalpha = vec![0.0; g_n];
        let inv_s = 1.0 / s_n as f64;

        let mut ll = 0.0;
        let mut kl = 0.0;
        let mut w = vec![0.0; t_n];
        let mut gw = vec![0.0; t_n];
        for s in 0..s_n {
            for t in 0..t_n {
                let i = s * t_n + t;
                let sd = q.w_ls[i].exp();
                w[t] = (q.w_loc[i] + sd * noise.w[i]).exp();
                kl += 0.5 * (sd * sd + q.w_loc[i] * q.w_loc[i] - 1.0) - q.w_ls[i];
            }
            let dsd = q.d_ls[s].exp();
            let d = (q.d_loc[s] + dsd * noise.d[s]).exp();
            kl += 0.5 * (dsd * dsd + q.d_loc[s] * q.d_loc[s] - 1.0) - q.d_ls[s];

            gw.iter_mut().for_each(|x| *x = 0.0);
            let mut gd = 0.0;
            let counts = self.counts.row(s);
            for g in 0..g_n {
                let sig = self.signature.row(g);
                let mix: f64 = w.iter().zip(sig).map(|(a, b)| a * b).sum();
                let mu = d * mix;
                let y = counts[g] as f64;
                ll += nb_loglik_unchecked(y, mu, alpha[g]);
                if want_grad {
                    let (dmu, dal) = nb_grad(y, mu, alpha[g]);
                    for t in 0..t_n {
                        gw[t] += dmu * d * sig[t];
                    }
                    gd += dmu * mix;
                    dalpha[g] += dal;
                }
            }
            if want_grad {
                // loss = -(ll - kl) / S
                for t in 0..t_n {
                    let i = s * t_n + t;
                    let sd = q.w_ls[i].exp();
                    let dz = -gw[t] * w[t] * inv_s;
                    grad[i] = dz + q.w_loc[i] * inv_s;
                    grad[st + i] = dz * sd * noise.w[i] + (sd * sd - 1.0) * inv_s;
                }
                let dz = -gd * d * inv_s;
                grad[2 * st + s] = dz + q.d_loc[s] * inv_s;
                grad[2 * st + s_n + s] = dz * dsd * noise.d[s] + (dsd * dsd - 1.0) * inv_s;
            }
        }
        if want_grad {
            for g in 0..g_n {
                grad[2 * st + 2 * s_n + g] = -dalpha[g] * sigmoid(q.alpha_raw[g]) * inv_s;
            }
        }
        (-(ll - kl) * inv_s, grad)
    }
}

/// Fit the variational posterior for every spot against a panel-restricted
/// signature matrix (G_de × T).
pub fn deconvolve(
    st_counts: &CountMatrix,
    signature_panel: &Matrix,
    cfg: &DeconvConfig,
    rng: &Rng,
) -> Result<DeconvPosterior> {
    let obj = ElboObjective::new(st_counts, signature_panel)?;
    let (s_n, t_n, _) = obj.dims();
    if s_n == 0 {
        return Err(DuetError::input("no spots to deconvolve"));
    }
    let mut p = obj.init_params();
    let mut opt = Adam::new(cfg.lr);
    for epoch in 0..cfg.epochs {
        let mut step_rng = rng.child(epoch as u64);
        let noise = ElboNoise::draw(&mut step_rng, s_n, t_n);
        let (f, g) = obj.value_and_grad(&p, &noise);
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(DuetError::Diverged {
                epoch,
                what: "deconvolution ELBO is not finite".into(),
            });
        }
        opt.step(&mut p, &g);
        // keep the log-scale parameters in a range where exp() stays finite
        let st = s_n * t_n;
        for v in &mut p[..2 * st + 2 * s_n] {
            *v = v.clamp(-30.0, 30.0);
        }
    }
    Ok(DeconvPosterior::from_params(&split(&p, s_n, t_n), s_n, t_n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::fd_check;

    fn mixture(rng: &mut Rng, s_n: usize, t_n: usize, g_n: usize, depth: f64) -> (CountMatrix, Matrix, Matrix) {
        let sig = Matrix::from_fn(g_n, t_n, |_, _| (1.5 * rng.normal()).exp());
        let props = Matrix::from_fn(s_n, t_n, |_, _| 0.0);
        let mut props = props;
        for s in 0..s_n {
            let w = rng.dirichlet(1.0, t_n);
            props.row_mut(s).copy_from_slice(&w);
        }
        let mut counts = CountMatrix::zeros(s_n, g_n);
        for s in 0..s_n {
            for g in 0..g_n {
                let mu: f64 = (0..t_n).map(|t| depth * props.get(s, t) * sig.get(g, t)).sum();
                counts.set(s, g, rng.neg_binomial(mu, 20.0) as u32);
            }
        }
        (counts, sig, props)
    }

    #[test]
    fn recovers_mixture_proportions() {
        let mut rng = Rng::new(21);
        let (counts, sig, props) = mixture(&mut rng, 50, 4, 100, 30.0);
        let post = deconvolve(&counts, &sig, &DeconvConfig::default(), &Rng::new(3)).unwrap();
        let est = post.proportions();
        let mae: f64 = est
            .data()
            .iter()
            .zip(props.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / est.data().len() as f64;
        assert!(mae < 0.05, "{mae}");
    }

    #[test]
    fn single_type_is_all_ones() {
        let mut rng = Rng::new(2);
        let (counts, sig, _) = mixture(&mut rng, 5, 1, 20, 10.0);
        let cfg = DeconvConfig {
            epochs: 50,
            ..Default::default()
        };
        let post = deconvolve(&counts, &sig, &cfg, &Rng::new(1)).unwrap();
        assert!(post.proportions().data().iter().all(|&x| x == 1.0));
        assert!(post.q05_normalized().data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn zero_spot_stays_small_and_normalized() {
        let mut rng = Rng::new(4);
        let (mut counts, sig, _) = mixture(&mut rng, 6, 3, 40, 20.0);
        for g in 0..40 {
            counts.set(0, g, 0);
        }
        let post = deconvolve(&counts, &sig, &DeconvConfig::default(), &Rng::new(8)).unwrap();
        let zero_max = post.w_q05.row(0).iter().cloned().fold(0.0, f64::max);
        let other_min = (1..6)
            .map(|s| post.w_q05.row(s).iter().sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        assert!(zero_max > 0.0);
        assert!(zero_max < 0.1 * other_min, "{zero_max} vs {other_min}");
        let n = post.q05_normalized();
        assert!((n.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gene_mismatch_rejected() {
        let counts = CountMatrix::zeros(3, 10);
        let sig = Matrix::from_fn(9, 2, |_, _| 1.0);
        let err = deconvolve(&counts, &sig, &DeconvConfig::default(), &Rng::new(0)).unwrap_err();
        assert!(matches!(err, DuetError::Input(_)));
    }

    #[test]
    fn quantiles_are_closed_form() {
        let mut rng = Rng::new(6);
        let (counts, sig, _) = mixture(&mut rng, 4, 3, 30, 10.0);
        let cfg = DeconvConfig {
            epochs: 100,
            ..Default::default()
        };
        let post = deconvolve(&counts, &sig, &cfg, &Rng::new(2)).unwrap();
        for s in 0..4 {
            for t in 0..3 {
                let expect = (post.w_loc.get(s, t) + post.w_logstd.get(s, t).exp() * NORMAL_Q05).exp();
                assert_eq!(post.w_q05.get(s, t), expect);
                assert!(expect > 0.0);
            }
        }
    }

    #[test]
    fn elbo_gradient_passes_fd() {
        let mut rng = Rng::new(9);
        let (counts, sig, _) = mixture(&mut rng, 3, 3, 7, 5.0);
        let obj = ElboObjective::new(&counts, &sig).unwrap();
        let mut p = obj.init_params();
        for v in p.iter_mut() {
            *v += 0.2 * rng.normal();
        }
        let noise = ElboNoise::draw(&mut rng, 3, 3);
        let (_, g) = obj.value_and_grad(&p, &noise);
        let err = fd_check(|x| obj.value(x, &noise), &g, &p, 1e-5).unwrap();
        assert!(err < 1e-3, "{err}");
    }
}
