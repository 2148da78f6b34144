//! Small fully-connected network with hand-written reverse mode.
//!
//! All parameters live in one flat buffer: for each layer, the weight matrix
//! (`output × input`, row-major) followed by the bias vector. Gradients use the
//! same layout, so optimizers and checkpoints work on plain slices.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::rng::Rng;
use crate::error::{DuetError, Result};

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn deriv_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

impl LayerSpec {
    fn n_params(&self) -> usize {
        self.input * self.output + self.output
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<LayerSpec>,
    offsets: Vec<usize>,
    params: Vec<f64>,
    id: u64,
    generation: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.params == other.params
    }
}

/// Activations cached by a forward pass; consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    net_id: u64,
    generation: u64,
    /// `acts[0]` is the input batch, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Matrix>,
}

impl Tape {
    pub fn output(&self) -> &Matrix {
        self.acts.last().expect("tape always holds the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub params: Vec<f64>,
    pub input: Matrix,
}

impl Mlp {
    /// Xavier-uniform weights and zero biases. `dims` lists the layer widths
    /// from input to output; every hidden layer uses `hidden`, the last uses `out`.
    pub fn new(dims: &[usize], hidden: Activation, out: Activation, rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(DuetError::input("an MLP needs at least input and output widths"));
        }
        let layers: Vec<LayerSpec> = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerSpec {
                input: w[0],
                output: w[1],
                activation: if i + 2 == dims.len() { out } else { hidden },
            })
            .collect();
        let mut net = Self::zeros(layers)?;
        for l in 0..net.layers.len() {
            let spec = net.layers[l];
            let limit = (6.0 / (spec.input + spec.output) as f64).sqrt();
            let off = net.offsets[l];
            for w in &mut net.params[off..off + spec.input * spec.output] {
                *w = rng.uniform_range(-limit, limit);
            }
        }
        Ok(net)
    }

    pub fn zeros(layers: Vec<LayerSpec>) -> Result<Self> {
        let n = layers.iter().map(LayerSpec::n_params).sum();
        Self::from_params(layers, vec![0.0; n])
    }

    pub fn from_params(layers: Vec<LayerSpec>, params: Vec<f64>) -> Result<Self> {
        if layers.is_empty() {
            return Err(DuetError::input("an MLP needs at least one layer"));
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].output != w[1].input {
                return Err(DuetError::shape(format!(
                    "layer {i} emits {} values but layer {} expects {}",
                    w[0].output,
                    i + 1,
                    w[1].input
                )));
            }
        }
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for l in &layers {
            offsets.push(total);
            total += l.n_params();
        }
        if params.len() != total {
            return Err(DuetError::shape(format!(
                "network has {total} parameters, got {}",
                params.len()
            )));
        }
        Ok(Self {
            layers,
            offsets,
            params,
            id: NEXT_NET_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutate parameters in place. Invalidates outstanding tapes.
    pub fn update_params<R>(&mut self, f: impl FnOnce(&mut [f64]) -> R) -> R {
        self.generation += 1;
        f(&mut self.params)
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.params.len() {
            return Err(DuetError::shape(format!(
                "network has {} parameters, got {}",
                self.params.len(),
                p.len()
            )));
        }
        self.update_params(|dst| dst.copy_from_slice(p));
        Ok(())
    }

    /// (weights, bias) slices of layer `l`.
    pub fn layer_params(&self, l: usize) -> (&[f64], &[f64]) {
        let spec = self.layers[l];
        let off = self.offsets[l];
        let nw = spec.input * spec.output;
        (
            &self.params[off..off + nw],
            &self.params[off + nw..off + nw + spec.output],
        )
    }

    fn layer_forward(&self, l: usize, input: &Matrix) -> Matrix {
        let spec = self.layers[l];
        let (w, b) = self.layer_params(l);
        let mut out = Matrix::zeros(input.rows(), spec.output);
        for n in 0..input.rows() {
            let x = input.row(n);
            let y = out.row_mut(n);
            for o in 0..spec.output {
                let wr = &w[o * spec.input..(o + 1) * spec.input];
                let z: f64 = wr.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[o];
                y[o] = spec.activation.apply(z);
            }
        }
        out
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(DuetError::shape(format!(
                "network expects input width {}, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        Ok(())
    }

    /// Batched forward pass (one sample per row) without recording a tape.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut a = self.layer_forward(0, x);
        for l in 1..self.layers.len() {
            a = self.layer_forward(l, &a);
        }
        Ok(a)
    }

    pub fn forward_batch(&self, x: &Matrix) -> Result<Tape> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for l in 0..self.layers.len() {
            let next = self.layer_forward(l, &acts[l]);
            acts.push(next);
        }
        Ok(Tape {
            net_id: self.id,
            generation: self.generation,
            acts,
        })
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
        let tape = self.forward_batch(&xm)?;
        Ok((tape.output().row(0).to_vec(), tape))
    }

    /// Reverse pass: gradients of `Σ_n dy[n] · y[n]` with respect to all
    /// parameters (summed over the batch) and to the input batch.
    pub fn backward(&self, tape: &Tape, dy: &Matrix) -> Result<MlpGrads> {
        if tape.net_id != self.id || tape.generation != self.generation {
            return Err(DuetError::Contract(
                "tape was recorded on a different network or before a parameter update".into(),
            ));
        }
        let out = tape.output();
        if dy.shape() != out.shape() {
            return Err(DuetError::shape(format!(
                "cotangent is {:?}, network output is {:?}",
                dy.shape(),
                out.shape()
            )));
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = dy.clone();
        for l in (0..self.layers.len()).rev() {
            let spec = self.layers[l];
            let y = &tape.acts[l + 1];
            let a = &tape.acts[l];
            for (d, &yv) in delta.data_mut().iter_mut().zip(y.data()) {
                *d *= spec.activation.deriv_from_output(yv);
            }
            let off = self.offsets[l];
            let nw = spec.input * spec.output;
            let (gw, gb) = grads[off..off + nw + spec.output].split_at_mut(nw);
            for n in 0..a.rows() {
                let arow = a.row(n);
                let drow = delta.row(n);
                for o in 0..spec.output {
                    let d = drow[o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, &av) in gw[o * spec.input..(o + 1) * spec.input].iter_mut().zip(arow) {
                        *g += d * av;
                    }
                }
            }
            let (w, _) = self.layer_params(l);
            let mut prev = Matrix::zeros(a.rows(), spec.input);
            for n in 0..a.rows() {
                let drow = delta.row(n);
                let prow = prev.row_mut(n);
                for o in 0..spec.output {
                    let d = drow[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (p, &wv) in prow.iter_mut().zip(&w[o * spec.input..(o + 1) * spec.input]) {
                        *p += d * wv;
                    }
                }
            }
            delta = prev;
        }
        Ok(MlpGrads {
            params: grads,
            input: delta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::gradcheck::fd_check;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(vec![LayerSpec {
            input: 3,
            output: 2,
            activation: Activation::Identity,
        }])
        .unwrap();
        let (y, _) = net.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer() {
        let spec = LayerSpec {
            input: 3,
            output: 3,
            activation: Activation::Identity,
        };
        let mut p = Matrix::identity(3).into_data();
        p.extend([0.0; 3]);
        let net = Mlp::from_params(vec![spec], p).unwrap();
        let x = [0.5, -1.5, 2.0];
        assert_eq!(net.forward(&x).unwrap().0, x.to_vec());
    }

    #[test]
    fn two_layer_relu_matches_scalar_evaluation() {
        let mut rng = Rng::new(17);
        let net = Mlp::new(&[3, 4, 2], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let x = [0.3, -0.7, 1.1];
        let (y, _) = net.forward(&x).unwrap();
        let (w1, b1) = net.layer_params(0);
        let (w2, b2) = net.layer_params(1);
        let mut h = [0.0; 4];
        for o in 0..4 {
            let mut z = b1[o];
            for i in 0..3 {
                z += w1[o * 3 + i] * x[i];
            }
            h[o] = if z > 0.0 { z } else { 0.0 };
        }
        for o in 0..2 {
            let mut z = b2[o];
            for i in 0..4 {
                z += w2[o * 4 + i] * h[i];
            }
            assert!((y[o] - z).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_cotangent_zero_gradient() {
        let mut rng = Rng::new(2);
        let net = Mlp::new(&[4, 5, 3], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let (_, tape) = net.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = net.backward(&tape, &Matrix::zeros(1, 3)).unwrap();
        assert!(g.params.iter().all(|&v| v == 0.0));
        assert!(g.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_scalar_gradient_is_input() {
        let spec = LayerSpec {
            input: 1,
            output: 1,
            activation: Activation::Identity,
        };
        let net = Mlp::from_params(vec![spec], vec![0.7, 0.0]).unwrap();
        let (_, tape) = net.forward(&[2.5]).unwrap();
        let g = net
            .backward(&tape, &Matrix::from_vec(1, 1, vec![1.0]).unwrap())
            .unwrap();
        assert_eq!(g.params[0], 2.5);
        assert_eq!(g.params[1], 1.0);
        assert_eq!(g.input.data(), &[0.7]);
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut rng = Rng::new(4);
        let mut net = Mlp::new(&[2, 2], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let (_, tape) = net.forward(&[1.0, 1.0]).unwrap();
        net.update_params(|p| p[0] += 1.0);
        let err = net.backward(&tape, &Matrix::zeros(1, 2)).unwrap_err();
        assert!(matches!(err, DuetError::Contract(_)));

        let other = net.clone();
        let (_, tape) = other.forward(&[1.0, 1.0]).unwrap();
        let cloned = Mlp::from_params(other.layers().to_vec(), other.params().to_vec()).unwrap();
        assert!(cloned.backward(&tape, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn random_architectures_pass_finite_differences() {
        let mut rng = Rng::new(2024);
        let acts = [Activation::Relu, Activation::Tanh, Activation::Identity];
        for trial in 0..20 {
            let depth = 1 + rng.below(3);
            let mut dims = vec![1 + rng.below(32)];
            for _ in 0..depth {
                dims.push(1 + rng.below(32));
            }
            let hidden = acts[trial % 3];
            let out = acts[(trial / 3) % 3];
            let net = Mlp::new(&dims, hidden, out, &mut rng).unwrap();
            let batch = 1 + rng.below(3);
            let x = Matrix::from_fn(batch, dims[0], |_, _| rng.normal());
            let cot = Matrix::from_fn(batch, *dims.last().unwrap(), |_, _| rng.normal());

            let tape = net.forward_batch(&x).unwrap();
            let g = net.backward(&tape, &cot).unwrap();

            let layers = net.layers().to_vec();
            let objective = |p: &[f64]| {
                let n = Mlp::from_params(layers.clone(), p.to_vec()).unwrap();
                let y = n.predict(&x).unwrap();
                y.data().iter().zip(cot.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let err = fd_check(objective, &g.params, net.params(), 1e-5).unwrap();
            assert!(err < 1e-4, "trial {trial} dims {dims:?}: {err}");

            let params = net.params().to_vec();
            let input_obj = |xi: &[f64]| {
                let xm = Matrix::from_vec(batch, dims[0], xi.to_vec()).unwrap();
                let n = Mlp::from_params(layers.clone(), params.clone()).unwrap();
                let y = n.predict(&xm).unwrap();
                y.data().iter().zip(cot.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let err = fd_check(input_obj, g.input.data(), x.data(), 1e-5).unwrap();
            assert!(err < 1e-4, "trial {trial} input grad: {err}");
        }
    }
}
