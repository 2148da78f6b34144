//! Synthetic single-cell references and spot data with known ground truth.
//!
//! Single cells follow `x_cg ~ NB(l_c · exp(m_g^(b)) · μ_tg, θ_g)`; spots
//! follow `y_sg ~ NB(d_s · Σ_t w_st · μ_tg, α_g)` with `w_s = n_s · Dirichlet(1)`
//! and `d_s` a shared capture efficiency, jittered per spot, set so the mean
//! library size is about `reads_per_spot`.
//! Image and foundation features are two independent random linear maps of
//! the noise-free expected log-expression plus Gaussian noise.
//!
//! Optionally a fraction of spots are exact replicates of a few archetype
//! spots (identical counts, independent feature noise), shifted along one
//! feature direction. Retrieval can match those exactly; the remaining spots
//! are novel mixtures.

use serde::{Deserialize, Serialize};

use crate::data::CountMatrix;
use crate::error::{DuetError, Result};
use crate::kernel::{Matrix, Rng};
use crate::scprior::ScDataset;

const EFFICIENCY_JITTER: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_types: usize,
    pub n_genes: usize,
    pub n_target_genes: usize,
    pub n_cells_per_type: usize,
    pub n_spots: usize,
    pub n_batches: usize,
    pub reads_per_spot: f64,
    pub feature_dim: usize,
    pub feature_noise_std: f64,
    pub n_slides: usize,
    /// Number of archetype spots replicated across the data; 0 disables.
    pub n_archetypes: usize,
    /// Fraction of spots that are archetype replicates.
    pub archetype_fraction: f64,
    /// Feature-space shift applied to archetype replicates.
    pub region_offset: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_types: 5,
            n_genes: 300,
            n_target_genes: 50,
            n_cells_per_type: 200,
            n_spots: 600,
            n_batches: 2,
            reads_per_spot: 5000.0,
            feature_dim: 64,
            feature_noise_std: 0.5,
            n_slides: 12,
            n_archetypes: 0,
            archetype_fraction: 0.0,
            region_offset: 0.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DuetError::input(m));
        if self.n_target_genes + 100 > self.n_genes {
            return fail(format!(
                "n_target_genes ({}) + 100 panel genes exceeds n_genes ({})",
                self.n_target_genes, self.n_genes
            ));
        }
        if self.n_types == 0 || self.n_cells_per_type == 0 || self.n_batches == 0 {
            return fail("need at least one type, one cell per type and one batch".into());
        }
        if self.n_spots == 0 || self.n_slides == 0 || self.n_slides > self.n_spots {
            return fail(format!(
                "{} spots cannot be split into {} slides",
                self.n_spots, self.n_slides
            ));
        }
        if !(self.reads_per_spot > 0.0) || !(self.feature_noise_std >= 0.0) {
            return fail("reads_per_spot must be positive and feature_noise_std non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.archetype_fraction) {
            return fail("archetype_fraction must lie in [0, 1]".into());
        }
        if self.archetype_fraction > 0.0 && self.n_archetypes == 0 {
            return fail("archetype_fraction > 0 needs n_archetypes > 0".into());
        }
        Ok(())
    }

    pub fn gene_ids(&self) -> Vec<String> {
        (0..self.n_genes).map(|g| format!("gene{g:04}")).collect()
    }

    pub fn type_ids(&self) -> Vec<String> {
        (0..self.n_types).map(|t| format!("type{t}")).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SynthTruth {
    /// T×G type rates.
    pub mu_true: Matrix,
    /// B×G batch offsets; row 0 is zero.
    pub batch_true: Matrix,
    pub cell_scale: Vec<f64>,
    pub sc_dispersion: Vec<f64>,
    /// Indices of the prediction target genes, ascending.
    pub target_genes: Vec<usize>,
    /// Filled by [`gen_spots`].
    pub spots: Option<SpotTruth>,
}

#[derive(Debug, Clone)]
pub struct SpotTruth {
    /// S×T abundances `n_s · π_s`.
    pub w_true: Matrix,
    pub n_true: Vec<f64>,
    pub d_true: Vec<f64>,
    pub st_dispersion: Vec<f64>,
    /// S×G noise-free expected counts.
    pub expected: Matrix,
    /// D×G maps from expected log-expression to features.
    pub img_map: Matrix,
    pub fm_map: Matrix,
    /// Archetype index for replicated spots.
    pub archetype: Vec<Option<usize>>,
}

#[derive(Debug, Clone)]
pub struct SpotData {
    pub counts: CountMatrix,
    pub img_features: Matrix,
    pub fm_features: Matrix,
    pub cell_count: Vec<f64>,
    pub slide: Vec<usize>,
    /// True per-type cell counts (S×T).
    pub gating_truth: Matrix,
}

/// One NB draw per gene around the expected counts of a spot.
pub fn sample_spot_counts(expected: &[f64], dispersion: &[f64], rng: &mut Rng) -> Vec<u32> {
    expected
        .iter()
        .zip(dispersion)
        .map(|(&mu, &a)| rng.neg_binomial(mu, a) as u32)
        .collect()
}

/// Single-cell reference drawn from the signature model.
pub fn gen_sc(cfg: &SynthConfig) -> Result<(ScDataset, SynthTruth)> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let (t_n, g_n, b_n) = (cfg.n_types, cfg.n_genes, cfg.n_batches);

    let mut r = root.named("mu");
    let base: Vec<f64> = (0..g_n).map(|_| r.normal()).collect();
    let mu_true = Matrix::from_fn(t_n, g_n, |_, g| (base[g] + r.normal()).exp());

    let mut r = root.named("batch");
    let batch_true = Matrix::from_fn(b_n, g_n, |b, _| if b == 0 { 0.0 } else { 0.2 * r.normal() });

    let mut r = root.named("sc-dispersion");
    let sc_dispersion: Vec<f64> = (0..g_n).map(|_| r.uniform_range(0.5, 5.0)).collect();

    let c_n = t_n * cfg.n_cells_per_type;
    let mut r = root.named("cell-scale");
    let mut cell_scale: Vec<f64> = (0..c_n).map(|_| (0.3 * r.normal()).exp()).collect();
    let mean = cell_scale.iter().sum::<f64>() / c_n as f64;
    cell_scale.iter_mut().for_each(|l| *l /= mean);

    let cell_type: Vec<usize> = (0..c_n).map(|c| c / cfg.n_cells_per_type).collect();
    let batch: Vec<usize> = (0..c_n).map(|c| c % b_n).collect();
    let mut counts = CountMatrix::zeros(c_n, g_n);
    let sc_rng = root.named("sc-counts");
    for c in 0..c_n {
        let mut r = sc_rng.child(c as u64);
        for g in 0..g_n {
            let m = cell_scale[c] * batch_true.get(batch[c], g).exp() * mu_true.get(cell_type[c], g);
            counts.set(c, g, r.neg_binomial(m, sc_dispersion[g]) as u32);
        }
    }

    // targets: genes whose log-rate varies most across cell types
    let mut spread: Vec<(f64, usize)> = (0..g_n)
        .map(|g| {
            let logs: Vec<f64> = (0..t_n).map(|t| mu_true.get(t, g).ln()).collect();
            let m = logs.iter().sum::<f64>() / t_n as f64;
            (logs.iter().map(|x| (x - m) * (x - m)).sum::<f64>(), g)
        })
        .collect();
    spread.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut target_genes: Vec<usize> = spread[..cfg.n_target_genes].iter().map(|x| x.1).collect();
    target_genes.sort_unstable();

    let data = ScDataset::new(counts, cell_type, batch, t_n, b_n)?;
    Ok((
        data,
        SynthTruth {
            mu_true,
            batch_true,
            cell_scale,
            sc_dispersion,
            target_genes,
            spots: None,
        },
    ))
}

/// Spot counts, features and true compositions. Stores the spot-level truth
/// into `truth.spots`.
pub fn gen_spots(cfg: &SynthConfig, truth: &mut SynthTruth) -> Result<SpotData> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed).named("spots");
    let (s_n, t_n, g_n, d_n) = (cfg.n_spots, cfg.n_types, cfg.n_genes, cfg.feature_dim);

    let mut r = root.named("st-dispersion");
    let st_dispersion: Vec<f64> = (0..g_n).map(|_| r.uniform_range(5.0, 50.0)).collect();

    let n_arch_spots = if cfg.n_archetypes > 0 {
        ((cfg.archetype_fraction * s_n as f64).round() as usize).min(s_n)
    } else {
        0
    };
    // replicated spots are spread over all slides
    let mut r = root.named("archetype-assign");
    let mut order = r.permutation(s_n);
    order.truncate(n_arch_spots);
    let mut archetype = vec![None; s_n];
    for (i, &s) in order.iter().enumerate() {
        archetype[s] = Some(i % cfg.n_archetypes);
    }

    let comp = |r: &mut Rng| {
        let n = r.int_inclusive(5, 50) as f64;
        let pi = r.dirichlet(1.0, t_n);
        (n, pi)
    };
    let mut r = root.named("archetype-comp");
    let arch_comp: Vec<(f64, Vec<f64>)> = (0..cfg.n_archetypes).map(|_| comp(&mut r)).collect();
    let mut r = root.named("composition");
    let mut w_true = Matrix::zeros(s_n, t_n);
    let mut n_true = vec![0.0; s_n];
    for s in 0..s_n {
        let (n, pi) = match archetype[s] {
            Some(k) => arch_comp[k].clone(),
            None => comp(&mut r),
        };
        n_true[s] = n;
        for t in 0..t_n {
            w_true.set(s, t, n * pi[t]);
        }
    }

    let mix = w_true.matmul(&truth.mu_true)?;
    let mean_total = mix.data().iter().sum::<f64>() / s_n as f64;
    // one capture efficiency for the whole assay with mild per-spot jitter,
    // so library size grows with the number of cells in a spot
    let base = cfg.reads_per_spot / mean_total;
    let mut r = root.named("efficiency");
    let arch_jitter: Vec<f64> = (0..cfg.n_archetypes).map(|_| r.normal()).collect();
    let mut r = root.named("efficiency-spot");
    let mut expected = Matrix::zeros(s_n, g_n);
    let mut d_true = vec![0.0; s_n];
    for s in 0..s_n {
        let z = match archetype[s] {
            Some(k) => arch_jitter[k],
            None => r.normal(),
        };
        d_true[s] = base * (EFFICIENCY_JITTER * z).exp();
        for g in 0..g_n {
            expected.set(s, g, d_true[s] * mix.get(s, g));
        }
    }

    let count_rng = root.named("st-counts");
    let mut arch_counts: Vec<Option<Vec<u32>>> = vec![None; cfg.n_archetypes];
    let mut counts = CountMatrix::zeros(s_n, g_n);
    for s in 0..s_n {
        let draw = |stream: u64| sample_spot_counts(expected.row(s), &st_dispersion, &mut count_rng.child(stream));
        let row = match archetype[s] {
            Some(k) => arch_counts[k].get_or_insert_with(|| draw(u64::MAX - k as u64)).clone(),
            None => draw(s as u64),
        };
        for (g, v) in row.into_iter().enumerate() {
            counts.set(s, g, v);
        }
    }

    let scale = 1.0 / (g_n as f64).sqrt();
    let mut r = root.named("img-map");
    let img_map = Matrix::from_fn(d_n, g_n, |_, _| scale * r.normal());
    let mut r = root.named("fm-map");
    let fm_map = Matrix::from_fn(d_n, g_n, |_, _| scale * r.normal());
    let mut r = root.named("region");
    let mut region: Vec<f64> = (0..d_n).map(|_| r.normal()).collect();
    let rn = region.iter().map(|x| x * x).sum::<f64>().sqrt();
    region.iter_mut().for_each(|x| *x /= rn);

    let log_expr = expected.map(f64::ln_1p);
    let features = |map: &Matrix, label: &str| -> Result<Matrix> {
        let mut f = log_expr.matmul(&map.transpose())?;
        let mut r = root.named(label);
        for s in 0..s_n {
            let shift = if archetype[s].is_some() { cfg.region_offset } else { 0.0 };
            for (j, v) in f.row_mut(s).iter_mut().enumerate() {
                *v += cfg.feature_noise_std * r.normal() + shift * region[j];
            }
        }
        Ok(f)
    };
    let img_features = features(&img_map, "img-noise")?;
    let fm_features = features(&fm_map, "fm-noise")?;

    let slide: Vec<usize> = (0..s_n).map(|s| s * cfg.n_slides / s_n).collect();

    truth.spots = Some(SpotTruth {
        w_true: w_true.clone(),
        n_true: n_true.clone(),
        d_true,
        st_dispersion,
        expected,
        img_map,
        fm_map,
        archetype,
    });
    Ok(SpotData {
        counts,
        img_features,
        fm_features,
        cell_count: n_true,
        slide,
        gating_truth: w_true,
    })
}
