//! Parametric branch: an MLP regression head over foundation features,
//! trained with MSE plus a cosine-annealed pull toward retrieval outputs.

use serde::{Deserialize, Serialize};

use crate::align::AlignModel;
use crate::checkpoint;
use crate::error::{DuetError, Result};
use crate::kernel::{Activation, Matrix, Mlp, Rng, SgdConfig, SgdState};
use crate::retrieval::{rebuild_db, retrieve_all, RetrievalConfig};

pub const REG_MAGIC: &[u8; 9] = b"DUET-REG1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealSchedule {
    pub lambda0: f64,
    pub e_d: usize,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self { lambda0: 1.0, e_d: 30 }
    }
}

impl AnnealSchedule {
    /// `λ0/2 · (1 + cos(π e / E_d))` before `E_d`, zero from then on.
    pub fn lambda_at(&self, e: usize) -> f64 {
        if e >= self.e_d {
            return 0.0;
        }
        let x = std::f64::consts::PI * (e as f64 / self.e_d as f64);
        0.5 * self.lambda0 * (1.0 + x.cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    /// Epoch index the schedule starts from; lets a run resume past the anneal.
    pub start_epoch: usize,
    pub batch_size: usize,
    pub anneal: AnnealSchedule,
    pub sgd: SgdConfig,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            epochs: 200,
            start_epoch: 0,
            batch_size: 128,
            anneal: AnnealSchedule::default(),
            sgd: SgdConfig {
                lr: 0.01,
                ..SgdConfig::default()
            },
        }
    }
}

/// `MSE(p, y) + λ·MSE(p, p_ret)` and its gradient in `p`; `p_ret` is a constant.
pub fn reg_loss(p_reg: &[f64], y: &[f64], p_ret: &[f64], lam: f64) -> Result<(f64, Vec<f64>)> {
    if p_reg.len() != y.len() || p_reg.len() != p_ret.len() {
        return Err(DuetError::input(format!(
            "regression loss inputs differ in length: {}, {}, {}",
            p_reg.len(),
            y.len(),
            p_ret.len()
        )));
    }
    let g = p_reg.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(p_reg.len());
    for ((&p, &t), &r) in p_reg.iter().zip(y).zip(p_ret) {
        loss += (p - t).powi(2) + lam * (p - r).powi(2);
        grad.push(2.0 / g * ((p - t) + lam * (p - r)));
    }
    Ok((loss / g, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegModel {
    pub head: Mlp,
}

impl RegModel {
    pub fn new(feature_dim: usize, n_genes: usize, hidden: &[usize], rng: &Rng) -> Result<Self> {
        let mut dims = vec![feature_dim];
        dims.extend_from_slice(hidden);
        dims.push(n_genes);
        let head = Mlp::new(
            &dims,
            Activation::Relu,
            Activation::Identity,
            &mut rng.named("reg-init"),
        )?;
        Ok(Self { head })
    }

    pub fn feature_dim(&self) -> usize {
        self.head.input_dim()
    }

    pub fn gene_dim(&self) -> usize {
        self.head.output_dim()
    }

    pub fn predict(&self, features: &Matrix) -> Result<Matrix> {
        self.head.predict(features)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(REG_MAGIC, &[&self.head], &[])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut nets, _) = checkpoint::decode(bytes, REG_MAGIC, 1, 0)?;
        Ok(Self {
            head: nets.pop().expect("one net"),
        })
    }
}

/// What the consistency term retrieves from: the frozen alignment model, the
/// training spots' image features and gating rows, and their expressions as
/// the database contents. Query `i` is database row `i` and is left out of
/// its own retrieval.
#[derive(Debug, Clone, Copy)]
pub struct Consistency<'a> {
    pub align: &'a AlignModel,
    pub img_features: &'a Matrix,
    pub gating: &'a Matrix,
    pub spot_ids: &'a [String],
    pub retrieval: &'a RetrievalConfig,
}

#[derive(Debug, Clone)]
pub struct RegFit {
    pub model: RegModel,
    /// Plain MSE on the training set before training and after each epoch.
    pub train_mse: Vec<f64>,
    /// Mean minibatch objective per epoch.
    pub loss: Vec<f64>,
    /// Number of epochs whose consistency targets came from retrieval.
    pub retrieval_epochs: usize,
}

fn mse(a: &Matrix, b: &Matrix) -> f64 {
    let n = a.data().len().max(1) as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n
}

pub fn train_regress(
    features: &Matrix,
    targets: &Matrix,
    consistency: Option<Consistency<'_>>,
    cfg: &RegConfig,
    opt: &mut SgdState,
    rng: &Rng,
) -> Result<RegFit> {
    let s = features.rows();
    if s == 0 {
        return Err(DuetError::input("regression needs at least one training spot"));
    }
    if targets.rows() != s {
        return Err(DuetError::input(format!(
            "{s} feature rows but {} target rows",
            targets.rows()
        )));
    }
    if let Some(c) = &consistency {
        if c.img_features.rows() != s || c.gating.rows() != s || c.spot_ids.len() != s {
            return Err(DuetError::input(
                "consistency sources must cover exactly the training spots",
            ));
        }
        c.retrieval.validate()?;
    }
    if cfg.batch_size == 0 {
        return Err(DuetError::input("regression batch size must be positive"));
    }
    let mut model = RegModel::new(features.cols(), targets.cols(), &cfg.hidden, rng)?;
    let query = match &consistency {
        Some(c) => Some(c.align.embed_images(c.img_features)?),
        None => None,
    };
    let bs = cfg.batch_size.min(s);
    let shuffle_rng = rng.named("reg-shuffle");
    let mut params = model.head.params().to_vec();
    let mut train_mse = vec![mse(&model.predict(features)?, targets)];
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut retrieval_epochs = 0;

    for step in 0..cfg.epochs {
        let epoch = cfg.start_epoch + step;
        let lam = cfg.anneal.lambda_at(epoch);
        let p_ret = match (&consistency, &query) {
            (Some(c), Some(v)) if lam > 0.0 => {
                let db = rebuild_db(c.align, targets, c.gating, c.spot_ids)?;
                retrieval_epochs += 1;
                Some(retrieve_all(&db, v, c.gating, c.retrieval, true)?)
            }
            _ => None,
        };
        let order = shuffle_rng.child(epoch as u64).permutation(s);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(bs) {
            let x = features.select_rows(chunk);
            let tape = model.head.forward_batch(&x)?;
            let out = tape.output();
            let mut dy = Matrix::zeros(chunk.len(), targets.cols());
            let inv_b = 1.0 / chunk.len() as f64;
            for (r, &i) in chunk.iter().enumerate() {
                let anchor = p_ret.as_ref().map_or(targets.row(i), |p| p.row(i));
                let (l, g) = reg_loss(
                    out.row(r),
                    targets.row(i),
                    anchor,
                    if p_ret.is_some() { lam } else { 0.0 },
                )?;
                epoch_loss += l;
                for (d, gv) in dy.row_mut(r).iter_mut().zip(g) {
                    *d = gv * inv_b;
                }
            }
            let grads = model.head.backward(&tape, &dy)?;
            if grads.params.iter().any(|g| !g.is_finite()) {
                return Err(DuetError::Diverged {
                    epoch,
                    what: "regression gradient".into(),
                });
            }
            opt.step(&mut params, &grads.params);
            model.head.set_params(&params)?;
        }
        let epoch_loss = epoch_loss / s as f64;
        let m = mse(&model.predict(features)?, targets);
        if !epoch_loss.is_finite() || !m.is_finite() {
            return Err(DuetError::Diverged {
                epoch,
                what: "regression loss".into(),
            });
        }
        losses.push(epoch_loss);
        train_mse.push(m);
    }
    Ok(RegFit {
        model,
        train_mse,
        loss: losses,
        retrieval_epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::fd_check;

    #[test]
    fn schedule_values() {
        let s = AnnealSchedule::default();
        assert_eq!(s.lambda_at(0), 1.0);
        assert_eq!(s.lambda_at(15), 0.5);
        assert_eq!(s.lambda_at(30), 0.0);
        assert_eq!(s.lambda_at(45), 0.0);
        for e in 0..30 {
            assert!(s.lambda_at(e + 1) <= s.lambda_at(e));
        }
        for e_d in (2..1000).step_by(2) {
            let s = AnnealSchedule { lambda0: 1.0, e_d };
            assert_eq!(s.lambda_at(e_d / 2), 0.5, "E_d = {e_d}");
        }
    }

    #[test]
    fn loss_examples() {
        let (l, g) = reg_loss(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0], 3.0).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
        let (l, _) = reg_loss(&[1.0, 1.0], &[0.0, 0.0], &[5.0, 5.0], 0.0).unwrap();
        assert_eq!(l, 1.0);
        assert!(reg_loss(&[1.0], &[1.0, 2.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let mut rng = Rng::new(3);
        for _ in 0..10 {
            let p: Vec<f64> = (0..7).map(|_| rng.normal()).collect();
            let y: Vec<f64> = (0..7).map(|_| rng.normal()).collect();
            let r: Vec<f64> = (0..7).map(|_| rng.normal()).collect();
            let lam = rng.uniform_range(0.0, 2.0);
            let (_, g) = reg_loss(&p, &y, &r, lam).unwrap();
            let err = fd_check(|q| reg_loss(q, &y, &r, lam).unwrap().0, &g, &p, 1e-5).unwrap();
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = RegModel::new(4, 3, &[5, 6], &Rng::new(1)).unwrap();
        assert_eq!(RegModel::from_bytes(&m.to_bytes()).unwrap(), m);
    }
}
