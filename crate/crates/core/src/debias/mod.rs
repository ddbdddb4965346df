//! Baseline-logit refinement and the consistency-gradient-conflict projection.
//!
//! A constant "baseline" input `I` (black by default) is pushed through the
//! classifier; its logits `g(I)` measure class-level bias. Refinement subtracts
//! them, `g'(x) = g(x) − g(I)`, when producing pseudo-labels during training
//! and again at inference.
//!
//! Two parameter-space gradients drive the projection:
//!
//! * `G_b`: gradient of the consistency loss (the biased direction);
//! * `G_d`: gradient of the mean KL divergence between the softmax of raw and
//!   refined weak-view logits (the debiased direction).
//!
//! When they conflict (`G_d · G_b < 0`), [`lcgc_combine`] pushes `G_b` further
//! against `G_d` by `λ` times its projection, training a deliberately
//! over-biased model that test-time refinement then corrects.

mod attribution;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradient::GradientVector;
use crate::model::{argmax, Mlp};
use crate::ssl::{consistency_loss, PseudoLabelBatch};
use crate::data::AugmentConfig;
use crate::tensor::{Tape, Tensor, Var};

pub use attribution::{integrated_gradients, verify_ig_decomposition, AttributionSample, DecompositionReport};
pub use train::{
    evaluate, train, train_step, Backbone, Evaluation, LcgcConfig, Method, RunRecord, StepRecord,
    TrainConfig, TrainState,
};

/// Below this norm `G_d` is treated as zero and the projection is skipped.
pub const MIN_DEBIAS_NORM: f64 = 1e-12;

/// Named constant-input palette.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineColor {
    Black,
    White,
    Gray,
    Red,
    Green,
    Blue,
}

impl BaselineColor {
    pub const ALL: [BaselineColor; 6] = [
        BaselineColor::Black,
        BaselineColor::White,
        BaselineColor::Gray,
        BaselineColor::Red,
        BaselineColor::Green,
        BaselineColor::Blue,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineColor::Black => "black",
            BaselineColor::White => "white",
            BaselineColor::Gray => "gray",
            BaselineColor::Red => "red",
            BaselineColor::Green => "green",
            BaselineColor::Blue => "blue",
        }
    }
}

impl fmt::Display for BaselineColor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineColor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineColor::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                Error::config(None, None, format!(
                    "unknown baseline color `{s}` (expected one of black, white, gray, red, green, blue)"
                ))
            })
    }
}

/// The constant input `I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineInput {
    pub name: String,
    pub vector: Vec<f64>,
}

impl BaselineInput {
    pub fn black(dim: usize) -> Self {
        Self::from_color(BaselineColor::Black, dim, 1.0)
    }

    /// Builds a palette color for `dim`-vectors. `white_level` is the value of
    /// a fully lit coordinate. Coordinates are split into three interleaved
    /// "channels" (`i mod 3`) for the red/green/blue analogs.
    pub fn from_color(color: BaselineColor, dim: usize, white_level: f64) -> Self {
        let channel = |ch: usize| -> Vec<f64> {
            (0..dim).map(|i| if i % 3 == ch { white_level } else { 0.0 }).collect()
        };
        let vector = match color {
            BaselineColor::Black => vec![0.0; dim],
            BaselineColor::White => vec![white_level; dim],
            BaselineColor::Gray => vec![white_level / 2.0; dim],
            BaselineColor::Red => channel(0),
            BaselineColor::Green => channel(1),
            BaselineColor::Blue => channel(2),
        };
        Self {
            name: color.name().to_owned(),
            vector,
        }
    }
}

/// `g(I)`: one forward pass on the baseline.
pub fn baseline_logits(model: &Mlp, baseline: &BaselineInput) -> Result<Vec<f64>> {
    model.logits_one(&baseline.vector)
}

/// `g − g(I)`, elementwise.
pub fn refine_logits(logits: &[f64], baseline_logits: &[f64]) -> Result<Vec<f64>> {
    if logits.len() != baseline_logits.len() {
        return Err(Error::Dimension(format!(
            "{} logits but {} baseline logits",
            logits.len(),
            baseline_logits.len()
        )));
    }
    Ok(logits.iter().zip(baseline_logits).map(|(a, b)| a - b).collect())
}

/// Mean over rows of `KL(softmax(logits) ‖ softmax(refined))`.
pub fn kl_consistency_loss(tape: &mut Tape, logits: Var, refined: Var) -> Result<Var> {
    if tape.value(logits).shape() != tape.value(refined).shape() {
        return Err(Error::Dimension(format!(
            "logits {:?} and refined logits {:?} differ in shape",
            tape.value(logits).shape(),
            tape.value(refined).shape()
        )));
    }
    let rows = tape.value(logits).rows() as f64;
    let log_p = tape.log_softmax(logits)?;
    let log_q = tape.log_softmax(refined)?;
    let p = tape.softmax(logits)?;
    let ratio = tape.sub(log_p, log_q)?;
    let weighted = tape.mul(p, ratio)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, 1.0 / rows))
}

/// Output of [`grad_d`]: the KL loss, its parameter gradient, and the forward
/// values it was computed from.
#[derive(Debug, Clone)]
pub struct DebiasGradient {
    pub loss: f64,
    pub gradient: GradientVector,
    pub weak_logits: Tensor,
    pub baseline_logits: Vec<f64>,
}

/// `G_d = ∇_θ L_kl` on the weak views, differentiating through both `g(u)` and `g(I)`.
pub fn grad_d(model: &Mlp, weak_views: &Tensor, baseline: &BaselineInput) -> Result<DebiasGradient> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape);
    let x = tape.constant(weak_views.clone());
    let logits = model.forward(&mut tape, &params, x)?;
    let base_x = tape.constant(Tensor::row(baseline.vector.clone())?);
    let base_logits = model.forward(&mut tape, &params, base_x)?;
    let refined = tape.sub_row(logits, base_logits)?;
    let loss = kl_consistency_loss(&mut tape, logits, refined)?;
    tape.backward(loss)?;
    Ok(DebiasGradient {
        loss: tape.value(loss).data()[0],
        gradient: params.gradient(&tape),
        weak_logits: tape.value(logits).clone(),
        baseline_logits: tape.value(base_logits).data().to_vec(),
    })
}

/// `G_b = ∇_θ L_Con`: strong views are drawn from `rng` inside the call.
/// Returns the loss value with the gradient.
pub fn grad_b<R: Rng + ?Sized>(
    model: &Mlp,
    unlabeled: &[&[f64]],
    pseudo: &PseudoLabelBatch,
    augment: &AugmentConfig,
    rng: &mut R,
) -> Result<(f64, GradientVector)> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape);
    let loss = consistency_loss(&mut tape, model, &params, unlabeled, pseudo, augment, rng)?;
    tape.backward(loss)?;
    Ok((tape.value(loss).data()[0], params.gradient(&tape)))
}

/// The projection rule:
///
/// ```text
/// G = G_b                                   if G_d · G_b ≥ 0
/// G = G_b + λ (G_d · G_b / ‖G_d‖²) G_d      otherwise
/// ```
///
/// A `G_d` with norm below [`MIN_DEBIAS_NORM`] takes the first branch.
pub fn lcgc_combine(gb: &GradientVector, gd: &GradientVector, lambda: f64) -> Result<GradientVector> {
    let dot = gd.dot(gb)?;
    if dot >= 0.0 || gd.norm() < MIN_DEBIAS_NORM {
        return Ok(gb.clone());
    }
    let gd_sq = gd.dot(gd)?;
    let coef = lambda * dot / gd_sq;
    Ok(GradientVector::new(
        gb.values().iter().zip(gd.values()).map(|(b, d)| b + coef * d).collect(),
    ))
}

/// Inference-time refinement `g(x) − g(I)` for a batch, plus predictions.
/// `double_subtract` applies the literal `g'(x) − g(I) = g(x) − 2 g(I)` reading.
pub fn test_refine(
    model: &Mlp,
    x_test: &Tensor,
    baseline: &BaselineInput,
    double_subtract: bool,
) -> Result<(Tensor, Vec<usize>)> {
    let logits = model.logits(x_test)?;
    let base = baseline_logits(model, baseline)?;
    let factor = if double_subtract { 2.0 } else { 1.0 };
    let mut data = Vec::with_capacity(logits.numel());
    let mut preds = Vec::with_capacity(logits.rows());
    for row in logits.iter_rows() {
        let refined: Vec<f64> = row.iter().zip(&base).map(|(g, b)| g - factor * b).collect();
        preds.push(argmax(&refined));
        data.extend(refined);
    }
    Ok((Tensor::new(logits.shape().to_vec(), data)?, preds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Layer;
    use crate::tensor::{finite_diff_grad, softmax_row};
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    fn one_layer(weight: Vec<f64>, bias: Vec<f64>, d: usize, c: usize) -> Mlp {
        Mlp::from_layers(vec![Layer {
            weight: Tensor::new(vec![d, c], weight).unwrap(),
            bias: Tensor::new(vec![c], bias).unwrap(),
        }])
        .unwrap()
    }

    #[test]
    fn palette() {
        let w = BaselineInput::from_color(BaselineColor::White, 4, 2.0);
        assert_eq!(w.vector, vec![2.0; 4]);
        assert_eq!(BaselineInput::from_color(BaselineColor::Gray, 2, 2.0).vector, vec![1.0, 1.0]);
        assert_eq!(
            BaselineInput::from_color(BaselineColor::Green, 6, 1.0).vector,
            vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]
        );
        assert_eq!(BaselineInput::black(3).vector, vec![0.0; 3]);
        assert_eq!("blue".parse::<BaselineColor>().unwrap(), BaselineColor::Blue);
        assert!("purple".parse::<BaselineColor>().is_err());
    }

    #[test]
    fn baseline_logits_examples() {
        let mut zero = Mlp::init(&[3, 4, 2], 1).unwrap();
        zero.set_flat_params(&vec![0.0; zero.num_params()]).unwrap();
        let white = BaselineInput::from_color(BaselineColor::White, 3, 5.0);
        assert_eq!(baseline_logits(&zero, &white).unwrap(), vec![0.0, 0.0]);

        let net = Mlp::init(&[3, 4, 2], 1).unwrap();
        assert_eq!(baseline_logits(&net, &white).unwrap(), baseline_logits(&net, &white).unwrap());

        let lin = one_layer(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![0.7, -0.2], 3, 2);
        assert_eq!(baseline_logits(&lin, &BaselineInput::black(3)).unwrap(), vec![0.7, -0.2]);
    }

    #[test]
    fn refine_examples() {
        assert_eq!(refine_logits(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(refine_logits(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        let r = refine_logits(&[2.0, 1.0, 0.0], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(r, vec![1.0, 0.0, -1.0]);
        assert_eq!(argmax(&r), 0);
        // a non-constant baseline can move the argmax
        assert_eq!(argmax(&refine_logits(&[2.0, 1.0], &[2.0, 0.0]).unwrap()), 1);
        assert!(matches!(refine_logits(&[1.0], &[1.0, 2.0]), Err(Error::Dimension(_))));
    }

    fn kl_value(logits: &[&[f64]], base: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::from_rows(logits).unwrap());
        let b = tape.constant(Tensor::row(base.to_vec()).unwrap());
        let r = tape.sub_row(l, b).unwrap();
        let kl = kl_consistency_loss(&mut tape, l, r).unwrap();
        tape.value(kl).data()[0]
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_value(&[&[1.0, -2.0, 0.5]], &[0.0, 0.0, 0.0]), 0.0);
        close(kl_value(&[&[1.0, -2.0, 0.5], &[0.0, 3.0, 1.0]], &[4.2, 4.2, 4.2]), 0.0, 1e-15);
        // KL(softmax[1,0] ‖ softmax[1,−1])
        let p = softmax_row(&[1.0, 0.0]);
        let q = softmax_row(&[1.0, -1.0]);
        let direct: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
        close(direct, 0.082_607_744_894_744_9, 1e-15);
        close(kl_value(&[&[1.0, 0.0]], &[0.0, 1.0]), direct, 1e-15);
    }

    #[test]
    fn refinement_shift_property() {
        let g = [0.3, -1.2, 2.0];
        let constant = refine_logits(&g, &[0.8, 0.8, 0.8]).unwrap();
        for (a, b) in softmax_row(&constant).iter().zip(softmax_row(&g)) {
            close(*a, b, 1e-15);
        }
        let varying = refine_logits(&g, &[0.8, -0.4, 0.1]).unwrap();
        let diff: f64 = softmax_row(&varying).iter().zip(softmax_row(&g)).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-3);
    }

    #[test]
    fn combine_examples() {
        let gb = GradientVector::new(vec![1.0, 0.0]);
        let out = lcgc_combine(&gb, &GradientVector::new(vec![1.0, 1.0]), 3.0).unwrap();
        assert_eq!(out, gb);
        let gd = GradientVector::new(vec![-1.0, 1.0]);
        assert_eq!(lcgc_combine(&gb, &gd, 0.0).unwrap().values(), gb.values());
        let out = lcgc_combine(&gb, &gd, 1.0).unwrap();
        assert_eq!(out.values(), &[1.5, -0.5]);
        assert_eq!(out.dot(&gd).unwrap(), -2.0);
        let err = lcgc_combine(&gb, &GradientVector::zeros(3), 1.0);
        assert!(matches!(err, Err(Error::Dimension(_))));
        // orthogonal: dot = 0 takes the passthrough branch
        let out = lcgc_combine(&gb, &GradientVector::new(vec![0.0, 1.0]), 1.0).unwrap();
        assert_eq!(out, gb);
        // vanishing G_d
        let tiny = GradientVector::new(vec![-1e-14, 0.0]);
        assert_eq!(lcgc_combine(&gb, &tiny, 1.0).unwrap(), gb);
    }

    proptest! {
        #[test]
        fn combine_amplifies_conflict(
            gb in proptest::collection::vec(-5.0f64..5.0, 6),
            gd in proptest::collection::vec(-5.0f64..5.0, 6),
            lambda in 0.0f64..3.0,
        ) {
            let gb = GradientVector::new(gb);
            let gd = GradientVector::new(gd);
            let out = lcgc_combine(&gb, &gd, lambda).unwrap();
            let dot = gd.dot(&gb).unwrap();
            if dot >= 0.0 {
                prop_assert_eq!(out, gb);
            } else if gd.norm() >= MIN_DEBIAS_NORM {
                let lhs = out.dot(&gd).unwrap();
                let rhs = (1.0 + lambda) * dot;
                prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
            }
        }

        #[test]
        fn kl_is_nonnegative(
            logits in proptest::collection::vec(-4.0f64..4.0, 12),
            base in proptest::collection::vec(-3.0f64..3.0, 4),
        ) {
            let rows: Vec<&[f64]> = logits.chunks(4).collect();
            prop_assert!(kl_value(&rows, &base) >= -1e-15);
        }
    }

    #[test]
    fn grad_d_zero_for_bias_free_black_baseline() {
        // Without biases, g(0) = 0 for every θ, so L_kl ≡ 0 near θ.
        let net = one_layer(vec![0.5, -0.3, 0.2, 0.9, -0.4, 0.1], vec![0.0, 0.0], 3, 2);
        let weak = Tensor::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]]).unwrap();
        let out = grad_d(&net, &weak, &BaselineInput::black(3)).unwrap();
        assert_eq!(out.loss, 0.0);
        let w_grad = &out.gradient.values()[..6];
        assert!(w_grad.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn grad_d_matches_finite_differences_and_replays() {
        let net = Mlp::init(&[3, 5, 3], 4).unwrap();
        let mut net = net;
        // non-zero biases so the baseline logits are not identically zero
        let mut flat = net.flat_params();
        for (i, v) in flat.iter_mut().enumerate() {
            *v += 0.05 * ((i % 7) as f64 - 3.5);
        }
        net.set_flat_params(&flat).unwrap();
        let weak = Tensor::from_rows(&[[0.4, -1.0, 0.8], [1.2, 0.3, -0.5], [0.0, 0.7, 0.2]]).unwrap();
        let base = BaselineInput::black(3);
        let out = grad_d(&net, &weak, &base).unwrap();
        let again = grad_d(&net, &weak, &base).unwrap();
        assert_eq!(out.gradient, again.gradient);
        let fd = finite_diff_grad(
            |theta| {
                let mut probe = net.clone();
                probe.set_flat_params(theta).unwrap();
                grad_d(&probe, &weak, &base).unwrap().loss
            },
            &flat,
            1e-6,
        )
        .unwrap();
        let err = out.gradient.max_relative_error(&fd, 1e-6).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn test_refine_examples() {
        // zero baseline logits: bias-free linear net with black baseline
        let lin = one_layer(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, 2);
        let x = Tensor::from_rows(&[[1.0, 3.0], [2.0, -1.0]]).unwrap();
        let (refined, preds) = test_refine(&lin, &x, &BaselineInput::black(2), false).unwrap();
        assert_eq!(refined, lin.logits(&x).unwrap());
        assert_eq!(preds, vec![1, 0]);

        // constant output: only biases
        let constant = one_layer(vec![0.0; 4], vec![2.0, 5.0], 2, 2);
        let (refined, preds) = test_refine(&constant, &x, &BaselineInput::black(2), false).unwrap();
        assert!(refined.data().iter().all(|v| *v == 0.0));
        assert_eq!(preds, vec![0, 0]);

        // biased toward class 0: raw argmax 0, refined argmax 1
        let biased = one_layer(vec![1.0, 0.0, 0.0, 1.0], vec![3.0, 0.0], 2, 2);
        let x = Tensor::from_rows(&[[0.0, 1.0]]).unwrap();
        assert_eq!(biased.predict(&[0.0, 1.0]).unwrap(), 0);
        let (refined, preds) = test_refine(&biased, &x, &BaselineInput::black(2), false).unwrap();
        assert_eq!(refined.data(), &[0.0, 1.0]);
        assert_eq!(preds, vec![1]);
        let (refined, _) = test_refine(&biased, &x, &BaselineInput::black(2), true).unwrap();
        assert_eq!(refined.data(), &[-3.0, 1.0]);
    }
}
