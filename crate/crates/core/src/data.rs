//! Count matrices and id bookkeeping shared by the pipeline stages.

use crate::error::{DuetError, Result};
use crate::kernel::Matrix;

/// Non-negative integer counts, rows = cells or spots, columns = genes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u32>,
}

impl CountMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(DuetError::shape(format!(
                "{rows}x{cols} count matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: u32) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select_cols(&self, idx: &[usize]) -> CountMatrix {
        let mut data = Vec::with_capacity(self.rows * idx.len());
        for i in 0..self.rows {
            let r = self.row(i);
            data.extend(idx.iter().map(|&j| r[j]));
        }
        CountMatrix {
            rows: self.rows,
            cols: idx.len(),
            data,
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> CountMatrix {
        let mut data = Vec::with_capacity(self.cols * idx.len());
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        CountMatrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.rows, self.cols, self.data.iter().map(|&x| x as f64).collect()).expect("shape preserved")
    }

    /// Elementwise natural `log(1 + x)`.
    pub fn log1p(&self) -> Matrix {
        self.to_matrix().map(f64::ln_1p)
    }
}

/// Elementwise `log(1 + x)` on a real matrix; rejects negative entries.
pub fn log1p_transform(m: &Matrix) -> Result<Matrix> {
    if let Some(pos) = m.data().iter().position(|&x| !(x >= 0.0)) {
        return Err(DuetError::input(format!(
            "log1p transform needs non-negative counts, entry {} is {}",
            pos,
            m.data()[pos]
        )));
    }
    Ok(m.map(f64::ln_1p))
}

/// Index of every id in `wanted` within `ids`.
pub fn index_of(ids: &[String], wanted: &[String]) -> Result<Vec<usize>> {
    let lookup: std::collections::HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    wanted
        .iter()
        .map(|w| {
            lookup
                .get(w.as_str())
                .copied()
                .ok_or_else(|| DuetError::input(format!("unknown id '{w}'")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Rng;

    #[test]
    fn log1p_values() {
        let m = Matrix::from_vec(1, 2, vec![0.0, std::f64::consts::E - 1.0]).unwrap();
        let t = log1p_transform(&m).unwrap();
        assert_eq!(t.get(0, 0), 0.0);
        assert!((t.get(0, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn log1p_rejects_negative() {
        let m = Matrix::from_vec(1, 2, vec![1.0, -0.5]).unwrap();
        assert!(matches!(log1p_transform(&m), Err(DuetError::Input(_))));
    }

    #[test]
    fn log1p_monotone() {
        let mut rng = Rng::new(8);
        for _ in 0..1000 {
            let a = rng.uniform_range(0.0, 1e4);
            let b = rng.uniform_range(0.0, 1e4);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            if lo < hi {
                assert!(lo.ln_1p() < hi.ln_1p());
            }
        }
    }

    #[test]
    fn counts_select() {
        let c = CountMatrix::from_vec(2, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(c.select_cols(&[2, 0]).data(), &[3, 1, 6, 4]);
        assert_eq!(c.select_rows(&[1]).data(), &[4, 5, 6]);
    }
}
