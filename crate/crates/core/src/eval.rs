//! Prediction metrics and normalized-variance curves.

use serde::{Deserialize, Serialize};

use crate::error::{DuetError, Result};
use crate::kernel::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub mae: f64,
    /// Per-gene correlation across spots; `None` where either series is constant.
    pub pcc_per_gene: Vec<Option<f64>>,
    /// Mean of the defined per-gene correlations.
    pub pcc_mean: f64,
    pub n_undefined: usize,
    /// Mean per-spot correlation across genes, same exclusion rule.
    pub pcc_spot_mean: f64,
    pub n_spots: usize,
    pub n_genes: usize,
}

/// Pearson correlation, `None` when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

fn mean_defined(xs: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = xs.iter().flatten().copied().collect();
    if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

pub fn metrics(pred: &Matrix, truth: &Matrix) -> Result<MetricsReport> {
    if pred.shape() != truth.shape() {
        return Err(DuetError::input(format!(
            "prediction is {:?}, truth is {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let (s, g) = pred.shape();
    if s < 2 {
        return Err(DuetError::input(format!("metrics need at least 2 spots, got {s}")));
    }
    let n = (s * g) as f64;
    let mut mse = 0.0;
    let mut mae = 0.0;
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        mse += (p - t) * (p - t);
        mae += (p - t).abs();
    }
    let pcc_per_gene: Vec<Option<f64>> = (0..g).map(|j| pearson(&pred.col(j), &truth.col(j))).collect();
    let per_spot: Vec<Option<f64>> = (0..s).map(|i| pearson(pred.row(i), truth.row(i))).collect();
    Ok(MetricsReport {
        mse: mse / n,
        mae: mae / n,
        pcc_mean: mean_defined(&pcc_per_gene),
        n_undefined: pcc_per_gene.iter().filter(|p| p.is_none()).count(),
        pcc_per_gene,
        pcc_spot_mean: mean_defined(&per_spot),
        n_spots: s,
        n_genes: g,
    })
}

pub fn mse(pred: &Matrix, truth: &Matrix) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(DuetError::input(format!(
            "prediction is {:?}, truth is {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let n = pred.data().len().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceCurve {
    /// Gene indices in ascending order of truth variance.
    pub order: Vec<usize>,
    pub truth_var_norm: Vec<f64>,
    pub pred_var_norm: Vec<f64>,
}

impl VarianceCurve {
    /// Mean absolute gap between the two normalized series.
    pub fn mean_abs_deviation(&self) -> f64 {
        let n = self.order.len() as f64;
        self.truth_var_norm
            .iter()
            .zip(&self.pred_var_norm)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n
    }
}

fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
}

/// Min-max scale to [0, 1]; a constant series maps to zeros.
fn min_max(xs: &[f64]) -> Vec<f64> {
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    xs.iter()
        .map(|&x| if span > 0.0 { (x - lo) / span } else { 0.0 })
        .collect()
}

pub fn variance_curve(pred: &Matrix, truth: &Matrix) -> Result<VarianceCurve> {
    if pred.shape() != truth.shape() {
        return Err(DuetError::input(format!(
            "prediction is {:?}, truth is {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let (s, g) = pred.shape();
    if g == 0 {
        return Err(DuetError::input("variance curve needs at least one gene"));
    }
    if s < 2 {
        return Err(DuetError::input(format!(
            "variance curve needs at least 2 spots, got {s}"
        )));
    }
    let tv: Vec<f64> = (0..g).map(|j| sample_variance(&truth.col(j))).collect();
    let pv: Vec<f64> = (0..g).map(|j| sample_variance(&pred.col(j))).collect();
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| tv[a].total_cmp(&tv[b]).then(a.cmp(&b)));
    let tv: Vec<f64> = order.iter().map(|&j| tv[j]).collect();
    let pv: Vec<f64> = order.iter().map(|&j| pv[j]).collect();
    Ok(VarianceCurve {
        order,
        truth_var_norm: min_max(&tv),
        pred_var_norm: min_max(&pv),
    })
}
