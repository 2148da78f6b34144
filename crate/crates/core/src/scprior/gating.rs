use super::deconv::{row_normalize, DeconvPosterior};
use crate::error::{DuetError, Result};
use crate::kernel::Matrix;

/// Per-spot expected cell counts by type: `g_st = n_s · ŵ_st / Σ_t ŵ_st`
/// where `ŵ` is the posterior 5% quantile.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingSignal {
    pub g: Matrix,
    pub cell_count: Vec<f64>,
}

impl GatingSignal {
    pub fn from_quantiles(w_q05: &Matrix, cell_counts: &[f64]) -> Result<Self> {
        if w_q05.rows() != cell_counts.len() {
            return Err(DuetError::input(format!(
                "{} spots in the posterior but {} cell counts",
                w_q05.rows(),
                cell_counts.len()
            )));
        }
        if let Some((s, &n)) = cell_counts
            .iter()
            .enumerate()
            .find(|(_, &n)| !(n >= 0.0 && n.is_finite()))
        {
            return Err(DuetError::input(format!("spot {s} has invalid cell count {n}")));
        }
        let mut g = row_normalize(w_q05);
        for (s, &n) in cell_counts.iter().enumerate() {
            g.row_mut(s).iter_mut().for_each(|x| *x *= n);
        }
        Ok(Self {
            g,
            cell_count: cell_counts.to_vec(),
        })
    }

    pub fn n_spots(&self) -> usize {
        self.g.rows()
    }

    pub fn row(&self, s: usize) -> &[f64] {
        self.g.row(s)
    }

    pub fn select(&self, idx: &[usize]) -> GatingSignal {
        GatingSignal {
            g: self.g.select_rows(idx),
            cell_count: idx.iter().map(|&i| self.cell_count[i]).collect(),
        }
    }
}

pub fn build_gating(post: &DeconvPosterior, cell_counts: &[f64]) -> Result<GatingSignal> {
    GatingSignal::from_quantiles(&post.w_q05, cell_counts)
}
