//! Per-spot fusion of the retrieval and regression branches through a small
//! adapter that maps frozen features to a blending weight in (0, 1).

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{DuetError, Result};
use crate::kernel::{Activation, Matrix, Mlp, Rng, SgdConfig, SgdState};

pub const FUSE_MAGIC: &[u8; 9] = b"DUET-FUS1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuseConfig {
    pub hidden: usize,
    pub reg_coef: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
}

impl Default for FuseConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            reg_coef: 1.0,
            epochs: 200,
            batch_size: 128,
            sgd: SgdConfig {
                lr: 0.05,
                ..SgdConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuseAdapter {
    pub mlp: Mlp,
    pub reg_coef: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedPrediction {
    pub y_duet: Vec<f64>,
    pub alpha: f64,
    pub y_ret: Vec<f64>,
    pub y_reg: Vec<f64>,
}

/// `½ + ½·tanh(z)`.
#[inline]
fn squash(z: f64) -> f64 {
    0.5 + 0.5 * z.tanh()
}

/// `y = α·y_ret + (1−α)·y_reg`, evaluated as `y_reg + α·(y_ret − y_reg)` so
/// equal branches pass through unchanged.
pub fn blend(alpha: f64, y_ret: &[f64], y_reg: &[f64]) -> Vec<f64> {
    y_ret.iter().zip(y_reg).map(|(&r, &g)| g + alpha * (r - g)).collect()
}

impl FuseAdapter {
    /// Hidden layer Xavier-initialized; output layer zero so every spot
    /// starts at equal weighting.
    pub fn new(feature_dim: usize, hidden: usize, reg_coef: f64, rng: &Rng) -> Result<Self> {
        let mut mlp = Mlp::new(
            &[feature_dim, hidden, 1],
            Activation::Relu,
            Activation::Identity,
            &mut rng.named("fuse-init"),
        )?;
        let n_first = feature_dim * hidden + hidden;
        mlp.update_params(|p| p[n_first..].iter_mut().for_each(|x| *x = 0.0));
        Ok(Self { mlp, reg_coef })
    }

    pub fn alpha(&self, f: &[f64]) -> Result<f64> {
        let x = Matrix::from_vec(1, f.len(), f.to_vec())?;
        Ok(self.alphas(&x)?[0])
    }

    pub fn alphas(&self, features: &Matrix) -> Result<Vec<f64>> {
        Ok(self.mlp.predict(features)?.data().iter().map(|&z| squash(z)).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(FUSE_MAGIC, &[&self.mlp], &[self.reg_coef])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut nets, trailer) = checkpoint::decode(bytes, FUSE_MAGIC, 1, 1)?;
        let mlp = nets.pop().expect("one net");
        if mlp.output_dim() != 1 {
            return Err(DuetError::input("fusion adapter must emit a single value"));
        }
        Ok(Self {
            mlp,
            reg_coef: trailer[0],
        })
    }
}

pub fn fuse_predict(adapter: &FuseAdapter, f: &[f64], y_ret: &[f64], y_reg: &[f64]) -> Result<FusedPrediction> {
    if y_ret.len() != y_reg.len() {
        return Err(DuetError::shape(format!(
            "branch predictions differ in length: {} vs {}",
            y_ret.len(),
            y_reg.len()
        )));
    }
    let alpha = adapter.alpha(f)?;
    Ok(FusedPrediction {
        y_duet: blend(alpha, y_ret, y_reg),
        alpha,
        y_ret: y_ret.to_vec(),
        y_reg: y_reg.to_vec(),
    })
}

/// Row-wise fusion; returns the fused matrix and the per-spot weights.
pub fn fuse_batch(
    adapter: &FuseAdapter,
    features: &Matrix,
    y_ret: &Matrix,
    y_reg: &Matrix,
) -> Result<(Matrix, Vec<f64>)> {
    if y_ret.shape() != y_reg.shape() || features.rows() != y_ret.rows() {
        return Err(DuetError::shape(format!(
            "fusion inputs disagree: features {:?}, retrieval {:?}, regression {:?}",
            features.shape(),
            y_ret.shape(),
            y_reg.shape()
        )));
    }
    let alphas = adapter.alphas(features)?;
    let mut out = Matrix::zeros(y_ret.rows(), y_ret.cols());
    for (s, &a) in alphas.iter().enumerate() {
        out.row_mut(s).copy_from_slice(&blend(a, y_ret.row(s), y_reg.row(s)));
    }
    Ok((out, alphas))
}

/// Frozen branch outputs and truth on held-out spots.
#[derive(Debug, Clone, PartialEq)]
pub struct FuseData {
    pub features: Matrix,
    pub y_ret: Matrix,
    pub y_reg: Matrix,
    pub y: Matrix,
}

impl FuseData {
    pub fn new(features: Matrix, y_ret: Matrix, y_reg: Matrix, y: Matrix) -> Result<Self> {
        let s = features.rows();
        if s == 0 {
            return Err(DuetError::input("fusion needs at least one held-out spot"));
        }
        if y_ret.rows() != s || y_reg.shape() != y_ret.shape() || y.shape() != y_ret.shape() {
            return Err(DuetError::input(format!(
                "held-out arrays disagree: features {:?}, retrieval {:?}, regression {:?}, truth {:?}",
                features.shape(),
                y_ret.shape(),
                y_reg.shape(),
                y.shape()
            )));
        }
        Ok(Self {
            features,
            y_ret,
            y_reg,
            y,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

/// Batch-mean `MSE(y_duet, y) + reg_coef·(α − ½)²` over `rows`, and its
/// gradient in the adapter parameters.
pub fn fuse_loss_and_grad(adapter: &FuseAdapter, data: &FuseData, rows: &[usize]) -> Result<(f64, Vec<f64>)> {
    let x = data.features.select_rows(rows);
    let tape = adapter.mlp.forward_batch(&x)?;
    let g = data.y.cols() as f64;
    let b = rows.len() as f64;
    let mut loss = 0.0;
    let mut dz = Matrix::zeros(rows.len(), 1);
    for (r, &s) in rows.iter().enumerate() {
        let z = tape.output().get(r, 0);
        let t = z.tanh();
        let alpha = 0.5 + 0.5 * t;
        let delta = alpha - 0.5;
        let (yr, yg, y) = (data.y_ret.row(s), data.y_reg.row(s), data.y.row(s));
        let mut sq = 0.0;
        let mut dalpha = 0.0;
        for k in 0..yr.len() {
            let diff = alpha * yr[k] + (1.0 - alpha) * yg[k] - y[k];
            sq += diff * diff;
            dalpha += 2.0 * diff * (yr[k] - yg[k]);
        }
        loss += sq / g + adapter.reg_coef * delta * delta;
        let dl_dalpha = dalpha / g + 2.0 * adapter.reg_coef * delta;
        dz.set(r, 0, dl_dalpha * 0.5 * (1.0 - t * t) / b);
    }
    let grads = adapter.mlp.backward(&tape, &dz)?;
    Ok((loss / b, grads.params))
}

#[derive(Debug, Clone)]
pub struct FuseFit {
    pub adapter: FuseAdapter,
    /// Full held-out objective before training and after each epoch.
    pub loss: Vec<f64>,
}

/// Train the adapter on frozen branch outputs, starting from `adapter`.
pub fn train_fuse(
    adapter: FuseAdapter,
    data: &FuseData,
    cfg: &FuseConfig,
    opt: &mut SgdState,
    rng: &Rng,
) -> Result<FuseFit> {
    if data.is_empty() {
        return Err(DuetError::input("fusion needs at least one held-out spot"));
    }
    if cfg.batch_size == 0 {
        return Err(DuetError::input("fusion batch size must be positive"));
    }
    let mut adapter = adapter;
    let all: Vec<usize> = (0..data.len()).collect();
    let mut history = vec![fuse_loss_and_grad(&adapter, data, &all)?.0];
    let mut params = adapter.mlp.params().to_vec();
    let shuffle_rng = rng.named("fuse-shuffle");
    let bs = cfg.batch_size.min(data.len());
    for epoch in 0..cfg.epochs {
        let order = shuffle_rng.child(epoch as u64).permutation(data.len());
        for chunk in order.chunks(bs) {
            let (_, grad) = fuse_loss_and_grad(&adapter, data, chunk)?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(DuetError::Diverged {
                    epoch,
                    what: "fusion gradient".into(),
                });
            }
            opt.step(&mut params, &grad);
            adapter.mlp.set_params(&params)?;
        }
        let l = fuse_loss_and_grad(&adapter, data, &all)?.0;
        if !l.is_finite() {
            return Err(DuetError::Diverged {
                epoch,
                what: "fusion loss".into(),
            });
        }
        history.push(l);
    }
    Ok(FuseFit { adapter, loss: history })
}
