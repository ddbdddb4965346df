//! Fully-connected ReLU classifier producing raw logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradient::GradientVector;
use crate::tensor::{matmul_raw, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `in × out`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

/// Classifier parameters θ. ReLU between layers, identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Layer dims and init seed, stored beside checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub dims: Vec<usize>,
    pub seed: Option<u64>,
}

/// Tape handles for every parameter of a model, in canonical order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<(Var, Var)>,
}

impl BoundParams {
    /// Flattens the gradients left by the last backward pass.
    pub fn gradient(&self, tape: &Tape) -> GradientVector {
        let mut values = Vec::new();
        for &(w, b) in &self.vars {
            for v in [w, b] {
                match tape.grad(v) {
                    Some(g) => values.extend_from_slice(g.data()),
                    None => values.extend(std::iter::repeat_n(0.0, tape.value(v).numel())),
                }
            }
        }
        GradientVector::new(values)
    }
}

/// Zero-based argmax; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl Mlp {
    /// He-style init: weights `N(0, 2/in)`, biases zero.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Dimension(format!("need at least input and output dims, got {dims:?}")));
        }
        if dims.contains(&0) {
            return Err(Error::Dimension(format!("layer dims must be positive, got {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let data = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
                Layer {
                    weight: Tensor::new(vec![fan_in, fan_out], data).expect("finite init"),
                    bias: Tensor::zeros(vec![fan_out]),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Dimension("model needs at least one layer".into()));
        }
        let mut prev: Option<usize> = None;
        for (i, l) in layers.iter().enumerate() {
            let ws = l.weight.shape();
            if ws.len() != 2 || l.bias.numel() != ws[1] {
                return Err(Error::Dimension(format!(
                    "layer {i}: weight {ws:?} and bias {:?} do not match",
                    l.bias.shape()
                )));
            }
            if let Some(p) = prev {
                if p != ws[0] {
                    return Err(Error::Dimension(format!(
                        "layer {i} expects {} inputs but the previous layer emits {p}",
                        ws[0]
                    )));
                }
            }
            prev = Some(ws[1]);
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.weight.shape()[1]));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.layers.last().expect("non-empty").weight.shape()[1]
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.numel() + l.bias.numel()).sum()
    }

    /// Parameters flattened layer by layer, weight then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            for t in [&mut l.weight, &mut l.bias] {
                let n = t.numel();
                *t = Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec())?;
                offset += n;
            }
        }
        Ok(())
    }

    /// Plain gradient-descent update `θ ← θ − lr · g`.
    pub fn descend(&mut self, grad: &GradientVector, lr: f64) -> Result<()> {
        if grad.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "gradient has {} entries for {} parameters",
                grad.len(),
                self.num_params()
            )));
        }
        let updated: Vec<f64> = self
            .flat_params()
            .iter()
            .zip(grad.values())
            .map(|(p, g)| p - lr * g)
            .collect();
        self.set_flat_params(&updated)
    }

    /// Registers every parameter on `tape` as a grad-requiring leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .layers
            .iter()
            .map(|l| (tape.leaf(l.weight.clone(), true), tape.leaf(l.bias.clone(), true)))
            .collect();
        BoundParams { vars }
    }

    /// Records a forward pass of `x[B×d]` on `tape`, returning logits `B×C`.
    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
        let d = tape.value(x).cols();
        if d != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input has {d} features, model expects {}",
                self.input_dim()
            )));
        }
        let mut h = x;
        let last = params.vars.len() - 1;
        for (i, &(w, b)) in params.vars.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, b)?;
            h = if i < last { tape.relu(z) } else { z };
        }
        Ok(h)
    }

    /// Logits for a batch without recording a tape.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input shape {:?} does not match model input dim {}",
                x.shape(),
                self.input_dim()
            )));
        }
        let m = x.rows();
        let mut h = x.data().to_vec();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let (k, n) = (l.weight.shape()[0], l.weight.shape()[1]);
            let mut z = matmul_raw(&h, l.weight.data(), m, k, n);
            for row in z.chunks_mut(n) {
                for (v, b) in row.iter_mut().zip(l.bias.data()) {
                    *v += b;
                }
            }
            if i < last {
                for v in &mut z {
                    *v = v.max(0.0);
                }
            }
            h = z;
        }
        Tensor::new(vec![m, self.classes()], h)
    }

    pub fn logits_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.logits(&Tensor::row(x.to_vec())?)?.into_data())
    }

    /// Argmax of the logits, ties toward class 0.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits_one(x)?))
    }

    pub fn manifest(&self, seed: Option<u64>) -> ModelManifest {
        ModelManifest { dims: self.dims(), seed }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_grad;

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = Mlp::init(&[4, 8, 3], 42).unwrap();
        let b = Mlp::init(&[4, 8, 3], 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, Mlp::init(&[4, 8, 3], 43).unwrap());
        assert!(a.layers().iter().all(|l| l.bias.data().iter().all(|v| *v == 0.0)));
        assert_eq!(a.dims(), vec![4, 8, 3]);
        assert_eq!(a.num_params(), 4 * 8 + 8 + 8 * 3 + 3);
    }

    #[test]
    fn init_weight_scale_monte_carlo() {
        let m = Mlp::init(&[50, 200], 1).unwrap();
        let w = m.layers()[0].weight.data();
        assert_eq!(w.len(), 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64).sqrt();
        let target = (2.0_f64 / 50.0).sqrt();
        assert!((std - target).abs() < 0.05 * target, "{std} vs {target}");
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(matches!(Mlp::init(&[4], 0), Err(Error::Dimension(_))));
        assert!(matches!(Mlp::init(&[4, 0, 2], 0), Err(Error::Dimension(_))));
    }

    fn hand_net() -> Mlp {
        // 2 → 2 (ReLU) → 2
        Mlp::from_layers(vec![
            Layer {
                weight: Tensor::new(vec![2, 2], vec![1.0, -1.0, 2.0, 0.5]).unwrap(),
                bias: Tensor::new(vec![2], vec![0.0, 1.0]).unwrap(),
            },
            Layer {
                weight: Tensor::new(vec![2, 2], vec![1.0, 0.0, -1.0, 2.0]).unwrap(),
                bias: Tensor::new(vec![2], vec![0.5, -0.5]).unwrap(),
            },
        ])
        .unwrap()
    }

    #[test]
    fn forward_matches_hand_arithmetic() {
        // x = (1, 2): hidden = relu([1+4+0, -1+1+1]) = [5, 1]
        // logits = [5·1 + 1·(−1) + 0.5, 5·0 + 1·2 − 0.5] = [4.5, 1.5]
        let net = hand_net();
        assert_eq!(net.logits_one(&[1.0, 2.0]).unwrap(), vec![4.5, 1.5]);
        // x = (−1, 0): hidden = relu([−1, 2]) = [0, 2]; logits = [−2 + 0.5, 4 − 0.5]
        assert_eq!(net.logits_one(&[-1.0, 0.0]).unwrap(), vec![-1.5, 3.5]);
        assert_eq!(net.predict(&[-1.0, 0.0]).unwrap(), 1);
    }

    #[test]
    fn tape_and_direct_forward_agree_bitwise() {
        let net = Mlp::init(&[3, 5, 4], 9).unwrap();
        let x = Tensor::from_rows(&[[0.1, -0.2, 0.3], [1.0, 2.0, -3.0]]).unwrap();
        let mut tape = Tape::new();
        let p = net.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = net.forward(&mut tape, &p, xv).unwrap();
        assert_eq!(tape.value(y), &net.logits(&x).unwrap());
    }

    #[test]
    fn zero_model_outputs_zero() {
        let mut net = Mlp::init(&[3, 4, 2], 0).unwrap();
        net.set_flat_params(&vec![0.0; net.num_params()]).unwrap();
        let out = net.logits(&Tensor::from_rows(&[[5.0, -3.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
        assert_eq!(net.predict(&[5.0, -3.0, 2.0]).unwrap(), 0);
    }

    #[test]
    fn identical_rows_identical_logits() {
        let net = Mlp::init(&[3, 4, 2], 5).unwrap();
        let out = net.logits(&Tensor::from_rows(&[[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]).unwrap()).unwrap();
        assert_eq!(out.row_slice(0), out.row_slice(1));
    }

    #[test]
    fn argmax_tie_rule() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[2.0, 5.0, 5.0]), 1);
    }

    #[test]
    fn dimension_mismatch() {
        let net = Mlp::init(&[3, 2], 0).unwrap();
        assert!(matches!(net.logits_one(&[1.0, 2.0]), Err(Error::Dimension(_))));
        let mut tape = Tape::new();
        let p = net.bind(&mut tape);
        let x = tape.constant(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
        assert!(matches!(net.forward(&mut tape, &p, x), Err(Error::Dimension(_))));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = Mlp::init(&[4, 6, 6, 3], 17).unwrap();
        let x0 = vec![0.3, -0.8, 1.2, 0.4];
        for c in 0..3 {
            let mut tape = Tape::new();
            let p = net.bind(&mut tape);
            let x = tape.leaf(Tensor::row(x0.clone()).unwrap(), true);
            let y = net.forward(&mut tape, &p, x).unwrap();
            let col = tape.column(y, c).unwrap();
            let s = tape.sum(col);
            tape.backward(s).unwrap();
            let auto = GradientVector::new(tape.grad(x).unwrap().data().to_vec());
            let fd = finite_diff_grad(|xs| net.logits_one(xs).unwrap()[c], &x0, 1e-6).unwrap();
            assert!(auto.max_relative_error(&fd, 1e-6).unwrap() < 1e-5);
        }
    }

    #[test]
    fn descend_and_flat_roundtrip() {
        let mut net = Mlp::init(&[2, 3, 2], 3).unwrap();
        let before = net.flat_params();
        let g = GradientVector::new(vec![1.0; net.num_params()]);
        net.descend(&g, 0.0).unwrap();
        assert_eq!(net.flat_params(), before);
        net.descend(&g, 0.5).unwrap();
        for (a, b) in net.flat_params().iter().zip(&before) {
            assert_eq!(*a, b - 0.5);
        }
    }
}
