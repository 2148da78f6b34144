//! Batch-aware negative binomial regression for cell-type signatures.
//!
//! Each count is modelled as `x_cg ~ NB(l_c · exp(m_g^(b_c)) · μ_{t_c,g}, θ_g)`.
//! Parameters are fitted by MAP: batch 0 is the reference (`m^(0) ≡ 0`), the
//! other batch offsets carry a `1e-3·‖m‖²` penalty, and cell scales are
//! renormalized to mean one after every epoch with the type rates absorbing
//! the factor, which leaves the objective unchanged.

use serde::{Deserialize, Serialize};

use super::nb::{nb_grad, nb_loglik_unchecked};
use super::POSITIVE_FLOOR;
use crate::data::CountMatrix;
use crate::error::{DuetError, Result};
use crate::kernel::{sigmoid, softplus, softplus_inv, Matrix, Rng};

const BATCH_PENALTY: f64 = 1e-3;

/// Labelled single-cell counts. Cell types and batches are zero-based.
#[derive(Debug, Clone)]
pub struct ScDataset {
    pub counts: CountMatrix,
    pub cell_type: Vec<usize>,
    pub batch: Vec<usize>,
    pub n_types: usize,
    pub n_batches: usize,
}

impl ScDataset {
    pub fn new(
        counts: CountMatrix,
        cell_type: Vec<usize>,
        batch: Vec<usize>,
        n_types: usize,
        n_batches: usize,
    ) -> Result<Self> {
        let ds = Self {
            counts,
            cell_type,
            batch,
            n_types,
            n_batches,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.counts.rows();
        if c == 0 || self.counts.cols() == 0 {
            return Err(DuetError::input("single-cell dataset is empty"));
        }
        if self.cell_type.len() != c || self.batch.len() != c {
            return Err(DuetError::input(format!(
                "{c} cells but {} type labels and {} batch labels",
                self.cell_type.len(),
                self.batch.len()
            )));
        }
        if self.n_types == 0 || self.n_batches == 0 {
            return Err(DuetError::input("need at least one cell type and one batch"));
        }
        if let Some(&t) = self.cell_type.iter().find(|&&t| t >= self.n_types) {
            return Err(DuetError::input(format!(
                "cell type label {t} out of range (n_types = {})",
                self.n_types
            )));
        }
        if let Some(&b) = self.batch.iter().find(|&&b| b >= self.n_batches) {
            return Err(DuetError::input(format!(
                "batch label {b} out of range (n_batches = {})",
                self.n_batches
            )));
        }
        let mut seen = vec![false; self.n_types];
        self.cell_type.iter().for_each(|&t| seen[t] = true);
        if let Some(t) = seen.iter().position(|s| !s) {
            return Err(DuetError::input(format!("cell type {t} has no cells")));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.counts.rows()
    }

    pub fn n_genes(&self) -> usize {
        self.counts.cols()
    }
}

/// Fitted signature model; all positive quantities are stored unconstrained
/// and mapped through `softplus(·) + 1e-6`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NbSignatureModel {
    pub n_types: usize,
    pub n_batches: usize,
    pub n_genes: usize,
    /// T×G raw type rates.
    pub mu_raw: Matrix,
    /// B×G batch offsets, row 0 identically zero.
    pub batch_effect: Matrix,
    pub cell_scale_raw: Vec<f64>,
    pub dispersion_raw: Vec<f64>,
    /// Objective value after each epoch.
    pub loss_trace: Vec<f64>,
}

#[inline]
fn pos(raw: f64) -> f64 {
    softplus(raw) + POSITIVE_FLOOR
}

impl NbSignatureModel {
    pub fn mu(&self, t: usize, g: usize) -> f64 {
        pos(self.mu_raw.get(t, g))
    }

    pub fn cell_scale(&self, c: usize) -> f64 {
        pos(self.cell_scale_raw[c])
    }

    pub fn dispersion(&self, g: usize) -> f64 {
        pos(self.dispersion_raw[g])
    }

    /// Signature matrix `M` (G×T) with `M[g][t] = μ_{t,g}`.
    pub fn signature(&self) -> Matrix {
        Matrix::from_fn(self.n_genes, self.n_types, |g, t| self.mu(t, g))
    }

    fn flatten(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        p.extend_from_slice(self.mu_raw.data());
        p.extend_from_slice(&self.batch_effect.data()[self.n_genes..]);
        p.extend_from_slice(&self.cell_scale_raw);
        p.extend_from_slice(&self.dispersion_raw);
        p
    }

    fn unflatten(&mut self, p: &[f64]) {
        let tg = self.n_types * self.n_genes;
        let bg = (self.n_batches - 1) * self.n_genes;
        let c = self.cell_scale_raw.len();
        self.mu_raw.data_mut().copy_from_slice(&p[..tg]);
        self.batch_effect.data_mut()[self.n_genes..].copy_from_slice(&p[tg..tg + bg]);
        self.cell_scale_raw.copy_from_slice(&p[tg + bg..tg + bg + c]);
        self.dispersion_raw.copy_from_slice(&p[tg + bg + c..]);
    }

    fn n_params(&self) -> usize {
        self.n_types * self.n_genes + (self.n_batches - 1) * self.n_genes + self.cell_scale_raw.len() + self.n_genes
    }

    /// Rescale cell factors to mean one, moving the factor into the type rates.
    fn pin_cell_scale(&mut self) {
        let c = self.cell_scale_raw.len() as f64;
        let mean = (0..self.cell_scale_raw.len()).map(|i| self.cell_scale(i)).sum::<f64>() / c;
        if !(mean > 0.0 && mean.is_finite()) {
            return;
        }
        for r in &mut self.cell_scale_raw {
            let target = pos(*r) / mean - POSITIVE_FLOOR;
            *r = softplus_inv(target.max(1e-12));
        }
        for r in self.mu_raw.data_mut() {
            let target = pos(*r) * mean - POSITIVE_FLOOR;
            *r = softplus_inv(target.max(1e-12));
        }
    }
}

/// MAP objective (negative mean per-cell log-likelihood plus batch penalty)
/// and its gradient with respect to the flat raw parameters.
pub struct SignatureObjective<'a> {
    data: &'a ScDataset,
    template: NbSignatureModel,
}

impl<'a> SignatureObjective<'a> {
    pub fn new(data: &'a ScDataset, template: NbSignatureModel) -> Self {
        Self { data, template }
    }

    pub fn params(&self) -> Vec<f64> {
        self.template.flatten()
    }

    pub fn value(&self, p: &[f64]) -> f64 {
        self.eval(p, false).0
    }

    pub fn value_and_grad(&self, p: &[f64]) -> (f64, Vec<f64>) {
        self.eval(p, true)
    }

    fn eval(&self, p: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
        let d = self.data;
        let (t_n, g_n, b_n) = (d.n_types, d.n_genes(), d.n_batches);
        let c_n = d.n_cells();
        let tg = t_n * g_n;
        let bg = (b_n - 1) * g_n;
        let (mu_raw, rest) = p.split_at(tg);
        let (batch, rest) = rest.split_at(bg);
        let (scale_raw, theta_raw) = rest.split_at(c_n);

        let mu: Vec<f64> = mu_raw.iter().map(|&r| pos(r)).collect();
        let theta: Vec<f64> = theta_raw.iter().map(|&r| pos(r)).collect();
        let batch_exp: Vec<f64> = batch.iter().map(|m| m.exp()).collect();

        let mut grad = if want_grad { vec![0.0; p.len()] } else { Vec::new() };
        let inv_c = 1.0 / c_n as f64;
        let mut ll = 0.0;
        for c in 0..c_n {
            let t = d.cell_type[c];
            let b = d.batch[c];
            let l = pos(scale_raw[c]);
            let counts = d.counts.row(c);
            let mut dl = 0.0;
            for g in 0..g_n {
                let eb = if b == 0 { 1.0 } else { batch_exp[(b - 1) * g_n + g] };
                let m = l * eb * mu[t * g_n + g];
                let x = counts[g] as f64;
                ll += nb_loglik_unchecked(x, m, theta[g]);
                if want_grad {
                    let (dm, dth) = nb_grad(x, m, theta[g]);
                    // loss = -ll / C
                    let dm = -dm * inv_c;
                    dl += dm * m / l;
                    grad[t * g_n + g] += dm * m / mu[t * g_n + g];
                    if b > 0 {
                        grad[tg + (b - 1) * g_n + g] += dm * m;
                    }
                    grad[tg + bg + c_n + g] -= dth * inv_c;
                }
            }
            if want_grad {
                grad[tg + bg + c] = dl * sigmoid(scale_raw[c]);
            }
        }
        let penalty: f64 = BATCH_PENALTY * batch.iter().map(|m| m * m).sum::<f64>();
        if want_grad {
            for i in 0..tg {
                grad[i] *= sigmoid(mu_raw[i]);
            }
            for (i, m) in batch.iter().enumerate() {
                grad[tg + i] += 2.0 * BATCH_PENALTY * m;
            }
            for g in 0..g_n {
                grad[tg + bg + c_n + g] *= sigmoid(theta_raw[g]);
            }
        }
        (-ll * inv_c + penalty, grad)
    }
}

/// Data-driven starting point: per-type mean counts, library-size cell
/// scales, unit dispersion, small random batch offsets.
pub fn init_signature_model(data: &ScDataset, rng: &mut Rng) -> NbSignatureModel {
    let (t_n, g_n, b_n, c_n) = (data.n_types, data.n_genes(), data.n_batches, data.n_cells());
    let totals: Vec<f64> = (0..c_n)
        .map(|c| data.counts.row(c).iter().map(|&x| x as f64).sum())
        .collect();
    // library size relative to the cell's own type, so type-level totals stay in μ
    let mut type_total = vec![0.0; t_n];
    let mut type_n = vec![0.0; t_n];
    for c in 0..c_n {
        type_total[data.cell_type[c]] += totals[c];
        type_n[data.cell_type[c]] += 1.0;
    }
    let mut scale: Vec<f64> = (0..c_n)
        .map(|c| {
            let t = data.cell_type[c];
            let mean = type_total[t] / type_n[t];
            if mean > 0.0 {
                (totals[c] / mean).max(1e-3)
            } else {
                1.0
            }
        })
        .collect();
    let mean_scale = scale.iter().sum::<f64>() / c_n as f64;
    for s in scale.iter_mut() {
        *s /= mean_scale;
    }

    let mut sums = Matrix::zeros(t_n, g_n);
    let mut weight = vec![0.0; t_n];
    for c in 0..c_n {
        let t = data.cell_type[c];
        weight[t] += scale[c];
        for (g, &x) in data.counts.row(c).iter().enumerate() {
            sums.set(t, g, sums.get(t, g) + x as f64);
        }
    }
    let mu_raw = Matrix::from_fn(t_n, g_n, |t, g| softplus_inv((sums.get(t, g) / weight[t]).max(1e-2)));
    let mut batch_effect = Matrix::zeros(b_n, g_n);
    for b in 1..b_n {
        for g in 0..g_n {
            batch_effect.set(b, g, 0.01 * rng.normal());
        }
    }
    NbSignatureModel {
        n_types: t_n,
        n_batches: b_n,
        n_genes: g_n,
        mu_raw,
        batch_effect,
        cell_scale_raw: scale.iter().map(|&s| softplus_inv(s)).collect(),
        dispersion_raw: vec![softplus_inv(1.0); g_n],
        loss_trace: Vec::new(),
    }
}

/// Fit the signature model by monotone preconditioned descent: RMS-scaled
/// gradient direction with Armijo backtracking, so the objective never
/// increases from one epoch to the next.
pub fn fit_signatures(data: &ScDataset, epochs: usize, rng: &Rng) -> Result<NbSignatureModel> {
    data.validate()?;
    if epochs == 0 {
        return Err(DuetError::input("fit_signatures needs at least one epoch"));
    }
    let mut init_rng = rng.named("signature-init");
    let mut model = init_signature_model(data, &mut init_rng);
    model.pin_cell_scale();

    let mut step = 0.05;
    let mut acc: Vec<f64> = Vec::new();
    let mut trace = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut p = model.flatten();
        let (f, g) = SignatureObjective::new(data, model.clone()).value_and_grad(&p);
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(DuetError::Diverged {
                epoch,
                what: "signature objective is not finite".into(),
            });
        }
        if acc.is_empty() {
            acc = g.iter().map(|v| v * v).collect();
        } else {
            for (a, v) in acc.iter_mut().zip(&g) {
                *a = 0.9 * *a + 0.1 * v * v;
            }
        }
        let dir: Vec<f64> = g.iter().zip(&acc).map(|(v, a)| -v / (a.sqrt() + 1e-12)).collect();
        let slope: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        let obj = SignatureObjective::new(data, model.clone());
        let mut t = step;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = p.iter().zip(&dir).map(|(x, d)| x + t * d).collect();
            let ft = obj.value(&trial);
            if ft.is_finite() && ft <= f + 1e-4 * t * slope {
                accepted = Some((trial, ft));
                break;
            }
            t *= 0.5;
        }
        let fval = match accepted {
            Some((trial, ft)) => {
                p = trial;
                step = (t * 1.5).min(1.0);
                ft
            }
            None => {
                step = (step * 0.25).max(1e-8);
                f
            }
        };
        model.unflatten(&p);
        model.pin_cell_scale();
        trace.push(fval);
    }
    model.loss_trace = trace;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::fd_check;

    fn nb_dataset(rng: &mut Rng, cells: usize, genes: usize, mu: f64, theta: f64, batches: usize) -> ScDataset {
        let mut counts = CountMatrix::zeros(cells, genes);
        for c in 0..cells {
            for g in 0..genes {
                counts.set(c, g, rng.neg_binomial(mu, theta) as u32);
            }
        }
        let batch = (0..cells).map(|c| c % batches).collect();
        ScDataset::new(counts, vec![0; cells], batch, 1, batches).unwrap()
    }

    #[test]
    fn recovers_constant_rate() {
        let mut rng = Rng::new(1);
        let data = nb_dataset(&mut rng, 200, 10, 5.0, 2.0, 1);
        let model = fit_signatures(&data, 200, &Rng::new(2)).unwrap();
        let m = model.signature();
        // per-gene sampling sd of the rate is ~0.3 with 200 cells
        let mean = m.col(0).iter().sum::<f64>() / 10.0;
        assert!((mean - 5.0).abs() < 0.5, "mean rate {mean}");
        for g in 0..10 {
            let v = m.get(g, 0);
            assert!((v - 5.0).abs() < 1.0, "gene {g}: {v}");
        }
    }

    #[test]
    fn identical_batches_have_no_offset() {
        let mut rng = Rng::new(3);
        let half = nb_dataset(&mut rng, 100, 8, 4.0, 3.0, 1);
        let mut counts = CountMatrix::zeros(200, 8);
        for c in 0..200 {
            for g in 0..8 {
                counts.set(c, g, half.counts.get(c % 100, g));
            }
        }
        let batch = (0..200).map(|c| c / 100).collect();
        let data = ScDataset::new(counts, vec![0; 200], batch, 1, 2).unwrap();
        let model = fit_signatures(&data, 200, &Rng::new(4)).unwrap();
        let offsets = &model.batch_effect.data()[8..];
        let mean_abs = offsets.iter().map(|m| m.abs()).sum::<f64>() / 8.0;
        assert!(mean_abs < 0.1, "{offsets:?}");
        assert!(model.batch_effect.data()[..8].iter().all(|&m| m == 0.0));
    }

    #[test]
    fn zero_counts_hit_the_floor() {
        let counts = CountMatrix::zeros(2, 4);
        let data = ScDataset::new(counts, vec![0, 1], vec![0, 0], 2, 1).unwrap();
        let model = fit_signatures(&data, 50, &Rng::new(0)).unwrap();
        let m = model.signature();
        assert!(m.is_finite());
        assert!(m.data().iter().all(|&v| v > 0.0 && v < 1e-2), "{:?}", m.data());
    }

    #[test]
    fn loss_is_monotone() {
        let mut rng = Rng::new(5);
        let data = nb_dataset(&mut rng, 120, 6, 3.0, 1.5, 2);
        let model = fit_signatures(&data, 100, &Rng::new(6)).unwrap();
        for w in model.loss_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let r = ScDataset::new(CountMatrix::zeros(0, 3), vec![], vec![], 1, 1);
        assert!(matches!(r, Err(DuetError::Input(_))));
    }

    #[test]
    fn map_gradient_passes_fd() {
        let mut rng = Rng::new(7);
        let mut counts = CountMatrix::zeros(9, 4);
        for c in 0..9 {
            for g in 0..4 {
                counts.set(c, g, rng.neg_binomial(3.0, 2.0) as u32);
            }
        }
        let data = ScDataset::new(
            counts,
            (0..9).map(|c| c % 2).collect(),
            (0..9).map(|c| c % 3).collect(),
            2,
            3,
        )
        .unwrap();
        let mut model = init_signature_model(&data, &mut rng);
        for b in 1..3 {
            for g in 0..4 {
                model.batch_effect.set(b, g, 0.3 * rng.normal());
            }
        }
        let obj = SignatureObjective::new(&data, model);
        let p = obj.params();
        let (_, g) = obj.value_and_grad(&p);
        let err = fd_check(|x| obj.value(x), &g, &p, 1e-5).unwrap();
        assert!(err < 1e-3, "{err}");
    }
}
