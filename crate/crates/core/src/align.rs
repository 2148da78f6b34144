//! Cross-modality alignment: two projection heads trained with a symmetric
//! InfoNCE objective so that image features and expression profiles of the
//! same spot land close together on the unit sphere.

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{DuetError, Result};
use crate::kernel::{log_sum_exp, matmul, Activation, Matrix, Mlp, Rng, SgdConfig, SgdState, Tape};

pub const ALIGN_MAGIC: &[u8; 9] = b"DUET-ALN1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub temperature: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub sgd: SgdConfig,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hidden: 128,
            temperature: 0.07,
            batch_size: 128,
            epochs: 150,
            sgd: SgdConfig {
                lr: 0.005,
                ..SgdConfig::default()
            },
        }
    }
}

/// Paired image features and log1p expression, one spot per row.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedBatch {
    pub img_features: Matrix,
    pub expressions: Matrix,
    pub spot_ids: Vec<String>,
}

impl PairedBatch {
    pub fn new(img_features: Matrix, expressions: Matrix, spot_ids: Vec<String>) -> Result<Self> {
        if img_features.rows() != expressions.rows() || spot_ids.len() != img_features.rows() {
            return Err(DuetError::input(format!(
                "paired batch rows disagree: {} features, {} expressions, {} ids",
                img_features.rows(),
                expressions.rows(),
                spot_ids.len()
            )));
        }
        Ok(Self {
            img_features,
            expressions,
            spot_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.spot_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spot_ids.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> PairedBatch {
        PairedBatch {
            img_features: self.img_features.select_rows(idx),
            expressions: self.expressions.select_rows(idx),
            spot_ids: idx.iter().map(|&i| self.spot_ids[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignModel {
    pub img_head: Mlp,
    pub gene_head: Mlp,
    pub temperature: f64,
}

/// Loss value with gradients for both sides of the pairing.
#[derive(Debug, Clone)]
pub struct InfoNce {
    pub loss: f64,
    pub grad_v: Matrix,
    pub grad_h: Matrix,
}

/// Symmetric InfoNCE over a batch of paired unit vectors, where row `i` of
/// `v` is the positive for row `i` of `h` and every other row is a negative.
pub fn infonce_loss(v: &Matrix, h: &Matrix, tau: f64) -> Result<InfoNce> {
    let n = v.rows();
    if n < 2 {
        return Err(DuetError::input(format!(
            "contrastive batch needs at least 2 pairs, got {n}"
        )));
    }
    if v.shape() != h.shape() {
        return Err(DuetError::shape(format!(
            "paired embeddings are {:?} and {:?}",
            v.shape(),
            h.shape()
        )));
    }
    if !(tau > 0.0) {
        return Err(DuetError::input(format!("temperature must be positive, got {tau}")));
    }
    let logits = matmul(v, &h.transpose())?.map(|s| s / tau);

    let mut loss = 0.0;
    let mut d_logits = Matrix::zeros(n, n);
    let scale = 1.0 / (2.0 * n as f64);
    for i in 0..n {
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        loss += lse - row[i];
        for j in 0..n {
            let p = (row[j] - lse).exp();
            d_logits.set(i, j, d_logits.get(i, j) + p);
        }
        d_logits.set(i, i, d_logits.get(i, i) - 1.0);
    }
    for j in 0..n {
        let col = logits.col(j);
        let lse = log_sum_exp(&col);
        loss += lse - col[j];
        for i in 0..n {
            let p = (col[i] - lse).exp();
            d_logits.set(i, j, d_logits.get(i, j) + p);
        }
        d_logits.set(j, j, d_logits.get(j, j) - 1.0);
    }
    loss *= scale;
    let d_logits = d_logits.map(|d| d * scale / tau);
    let grad_v = matmul(&d_logits, h)?;
    let grad_h = matmul(&d_logits.transpose(), v)?;
    Ok(InfoNce { loss, grad_v, grad_h })
}

/// Unit-normalize each row. A zero row maps to the constant unit vector.
pub fn l2_normalize_rows(z: &Matrix) -> Matrix {
    let d = z.cols();
    let mut u = z.clone();
    for i in 0..u.rows() {
        let row = u.row_mut(i);
        let nrm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nrm > 0.0 {
            row.iter_mut().for_each(|x| *x /= nrm);
        } else {
            let c = 1.0 / (d as f64).sqrt();
            row.iter_mut().for_each(|x| *x = c);
        }
    }
    u
}

/// Pull a cotangent on `u = z/‖z‖` back to `z`: `(du − u(u·du)) / ‖z‖`.
pub fn l2_normalize_backward(z: &Matrix, u: &Matrix, du: &Matrix) -> Matrix {
    let mut dz = Matrix::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        let nrm = z.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        if nrm == 0.0 {
            continue;
        }
        let ui = u.row(i);
        let dui = du.row(i);
        let proj: f64 = ui.iter().zip(dui).map(|(a, b)| a * b).sum();
        for (k, d) in dz.row_mut(i).iter_mut().enumerate() {
            *d = (dui[k] - ui[k] * proj) / nrm;
        }
    }
    dz
}

struct HeadPass {
    tape: Tape,
    unit: Matrix,
}

fn head_forward(net: &Mlp, x: &Matrix) -> Result<HeadPass> {
    let tape = net.forward_batch(x)?;
    let unit = l2_normalize_rows(tape.output());
    Ok(HeadPass { tape, unit })
}

impl AlignModel {
    pub fn new(img_dim: usize, n_genes: usize, cfg: &AlignConfig, rng: &Rng) -> Result<Self> {
        if !(cfg.temperature > 0.0) {
            return Err(DuetError::input(format!(
                "temperature must be positive, got {}",
                cfg.temperature
            )));
        }
        let mut r = rng.named("align-init");
        let img_head = Mlp::new(
            &[img_dim, cfg.hidden, cfg.embed_dim],
            Activation::Relu,
            Activation::Identity,
            &mut r,
        )?;
        let gene_head = Mlp::new(
            &[n_genes, cfg.hidden, cfg.embed_dim],
            Activation::Relu,
            Activation::Identity,
            &mut r,
        )?;
        Ok(Self {
            img_head,
            gene_head,
            temperature: cfg.temperature,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.img_head.output_dim()
    }

    pub fn embed_images(&self, x: &Matrix) -> Result<Matrix> {
        Ok(l2_normalize_rows(&self.img_head.predict(x)?))
    }

    pub fn embed_expressions(&self, y: &Matrix) -> Result<Matrix> {
        Ok(l2_normalize_rows(&self.gene_head.predict(y)?))
    }

    pub fn loss(&self, batch: &PairedBatch) -> Result<f64> {
        let v = self.embed_images(&batch.img_features)?;
        let h = self.embed_expressions(&batch.expressions)?;
        Ok(infonce_loss(&v, &h, self.temperature)?.loss)
    }

    /// Loss and gradient with respect to the concatenated parameters
    /// `[img_head, gene_head]`.
    pub fn loss_and_grad(&self, batch: &PairedBatch) -> Result<(f64, Vec<f64>)> {
        let img = head_forward(&self.img_head, &batch.img_features)?;
        let gene = head_forward(&self.gene_head, &batch.expressions)?;
        let nce = infonce_loss(&img.unit, &gene.unit, self.temperature)?;
        let dz_img = l2_normalize_backward(img.tape.output(), &img.unit, &nce.grad_v);
        let dz_gene = l2_normalize_backward(gene.tape.output(), &gene.unit, &nce.grad_h);
        let mut grad = self.img_head.backward(&img.tape, &dz_img)?.params;
        grad.extend(self.gene_head.backward(&gene.tape, &dz_gene)?.params);
        Ok((nce.loss, grad))
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.img_head.params().to_vec();
        p.extend_from_slice(self.gene_head.params());
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        let n = self.img_head.n_params();
        if p.len() != n + self.gene_head.n_params() {
            return Err(DuetError::shape(format!(
                "align model has {} parameters, got {}",
                n + self.gene_head.n_params(),
                p.len()
            )));
        }
        self.img_head.set_params(&p[..n])?;
        self.gene_head.set_params(&p[n..])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(ALIGN_MAGIC, &[&self.img_head, &self.gene_head], &[self.temperature])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut nets, trailer) = checkpoint::decode(bytes, ALIGN_MAGIC, 2, 1)?;
        let gene_head = nets.pop().expect("two nets");
        let img_head = nets.pop().expect("two nets");
        if img_head.output_dim() != gene_head.output_dim() {
            return Err(DuetError::input("align heads disagree on embedding width"));
        }
        Ok(Self {
            img_head,
            gene_head,
            temperature: trailer[0],
        })
    }
}

/// Trained model plus the probe-batch loss before training and after each epoch.
#[derive(Debug, Clone)]
pub struct AlignFit {
    pub model: AlignModel,
    pub probe_loss: Vec<f64>,
}

/// Minibatch SGD over shuffled pairs; the last partial batch of each epoch is
/// dropped so every softmax sees the same number of negatives. The probe is
/// the first full batch in input order.
pub fn train_align(data: &PairedBatch, cfg: &AlignConfig, opt: &mut SgdState, rng: &Rng) -> Result<AlignFit> {
    let n = data.len();
    if n < 2 {
        return Err(DuetError::input(format!("alignment needs at least 2 pairs, got {n}")));
    }
    if cfg.batch_size < 2 {
        return Err(DuetError::input("alignment batch size must be at least 2"));
    }
    let mut model = AlignModel::new(data.img_features.cols(), data.expressions.cols(), cfg, rng)?;
    let bs = cfg.batch_size.min(n);
    let probe = data.select(&(0..bs).collect::<Vec<_>>());
    let mut probe_loss = vec![model.loss(&probe)?];
    let mut params = model.params();
    let shuffle_rng = rng.named("align-shuffle");
    for epoch in 0..cfg.epochs {
        let order = shuffle_rng.child(epoch as u64).permutation(n);
        for chunk in order.chunks_exact(bs) {
            let batch = data.select(chunk);
            let (loss, grad) = model.loss_and_grad(&batch)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(DuetError::Diverged {
                    epoch,
                    what: "contrastive loss".into(),
                });
            }
            opt.step(&mut params, &grad);
            model.set_params(&params)?;
        }
        let l = model.loss(&probe)?;
        if !l.is_finite() {
            return Err(DuetError::Diverged {
                epoch,
                what: "contrastive probe loss".into(),
            });
        }
        probe_loss.push(l);
    }
    Ok(AlignFit { model, probe_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::fd_check;

    fn random_unit(rng: &mut Rng, n: usize, d: usize) -> Matrix {
        l2_normalize_rows(&Matrix::from_fn(n, d, |_, _| rng.normal()))
    }

    #[test]
    fn orthonormal_pairs_near_zero() {
        let v = Matrix::identity(2);
        let out = infonce_loss(&v, &v, 0.07).unwrap();
        let expected = (-1.0f64 / 0.07).exp().ln_1p();
        assert!((out.loss - expected).abs() < 1e-15);
        assert!((out.loss - 6.2e-7).abs() < 1e-8);
    }

    #[test]
    fn identical_pairs_at_chance() {
        let v = Matrix::from_rows(&[vec![0.6, 0.8], vec![0.6, 0.8]]).unwrap();
        let out = infonce_loss(&v, &v, 0.07).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_pair_rejected() {
        let v = Matrix::identity(1);
        assert!(matches!(infonce_loss(&v, &v, 0.07), Err(DuetError::Input(_))));
    }

    #[test]
    fn gradient_matches_differences() {
        let mut rng = Rng::new(4);
        let (n, d) = (4, 5);
        let v = random_unit(&mut rng, n, d);
        let h = random_unit(&mut rng, n, d);
        let out = infonce_loss(&v, &h, 0.07).unwrap();
        let mut p = v.data().to_vec();
        p.extend_from_slice(h.data());
        let mut analytic = out.grad_v.data().to_vec();
        analytic.extend_from_slice(out.grad_h.data());
        let err = fd_check(
            |q| {
                let v = Matrix::from_vec(n, d, q[..n * d].to_vec()).unwrap();
                let h = Matrix::from_vec(n, d, q[n * d..].to_vec()).unwrap();
                infonce_loss(&v, &h, 0.07).unwrap().loss
            },
            &analytic,
            &p,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn normalization_gradient_matches_differences() {
        let mut rng = Rng::new(5);
        let (n, d) = (4, 3);
        let zv = Matrix::from_fn(n, d, |_, _| rng.normal());
        let zh = Matrix::from_fn(n, d, |_, _| rng.normal());
        let f = |zv: &Matrix, zh: &Matrix| infonce_loss(&l2_normalize_rows(zv), &l2_normalize_rows(zh), 0.07).unwrap();
        let out = f(&zv, &zh);
        let uv = l2_normalize_rows(&zv);
        let uh = l2_normalize_rows(&zh);
        let mut analytic = l2_normalize_backward(&zv, &uv, &out.grad_v).into_data();
        analytic.extend(l2_normalize_backward(&zh, &uh, &out.grad_h).into_data());
        let mut p = zv.data().to_vec();
        p.extend_from_slice(zh.data());
        let err = fd_check(
            |q| {
                let a = Matrix::from_vec(n, d, q[..n * d].to_vec()).unwrap();
                let b = Matrix::from_vec(n, d, q[n * d..].to_vec()).unwrap();
                f(&a, &b).loss
            },
            &analytic,
            &p,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gradient_is_tangent_to_sphere() {
        let mut rng = Rng::new(6);
        let z = Matrix::from_fn(8, 6, |_, _| 3.0 * rng.normal());
        let u = l2_normalize_rows(&z);
        let h = random_unit(&mut rng, 8, 6);
        let out = infonce_loss(&u, &h, 0.07).unwrap();
        let dz = l2_normalize_backward(&z, &u, &out.grad_v);
        for i in 0..8 {
            let dotp: f64 = dz.row(i).iter().zip(u.row(i)).map(|(a, b)| a * b).sum();
            assert!(dotp.abs() < 1e-8, "{dotp}");
        }
    }

    #[test]
    fn model_gradient_matches_differences() {
        let rng = Rng::new(7);
        let cfg = AlignConfig {
            embed_dim: 3,
            hidden: 5,
            ..AlignConfig::default()
        };
        let mut model = AlignModel::new(4, 6, &cfg, &rng).unwrap();
        let mut r = Rng::new(8);
        let batch = PairedBatch::new(
            Matrix::from_fn(4, 4, |_, _| r.normal()),
            Matrix::from_fn(4, 6, |_, _| r.normal()),
            (0..4).map(|i| format!("s{i}")).collect(),
        )
        .unwrap();
        let (_, grad) = model.loss_and_grad(&batch).unwrap();
        let p0 = model.params();
        let err = fd_check(
            |q| {
                model.set_params(q).unwrap();
                model.loss(&batch).unwrap()
            },
            &grad,
            &p0,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn zero_row_normalizes_to_unit() {
        let z = Matrix::zeros(1, 4);
        let u = l2_normalize_rows(&z);
        let n: f64 = u.row(0).iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = AlignModel::new(3, 4, &AlignConfig::default(), &Rng::new(9)).unwrap();
        let back = AlignModel::from_bytes(&model.to_bytes()).unwrap();
        assert_eq!(back, model);
        assert!(AlignModel::from_bytes(b"DUET-REG1").is_err());
    }
}
