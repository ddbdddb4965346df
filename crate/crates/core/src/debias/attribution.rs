//! Integrated gradients along the straight path from the baseline input.

use serde::{Deserialize, Serialize};

use super::BaselineInput;
use crate::error::{Error, Result};
use crate::gradient::GradientVector;
use crate::model::{argmax, Mlp};
use crate::ssl::{consistency_loss_on_views, pseudo_label};
use crate::tensor::{Tape, Tensor};

/// Right-endpoint Riemann estimate of integrated gradients for logit `class`:
///
/// `IG_i = (x_i − I_i) · (1/m) Σ_{k=1..m} ∂g(I + (k/m)(x − I))_class / ∂x_i`
///
/// All `m` path points go through a single batched forward/backward pass.
pub fn integrated_gradients(
    model: &Mlp,
    x: &[f64],
    baseline: &[f64],
    class: usize,
    m_steps: usize,
) -> Result<Vec<f64>> {
    if m_steps == 0 {
        return Err(Error::Contract("integrated gradients need at least one step".into()));
    }
    if x.len() != baseline.len() {
        return Err(Error::Dimension(format!(
            "input has {} features, baseline {}",
            x.len(),
            baseline.len()
        )));
    }
    if class >= model.classes() {
        return Err(Error::Label(format!("class {class} outside 0..{}", model.classes())));
    }
    let delta: Vec<f64> = x.iter().zip(baseline).map(|(a, b)| a - b).collect();
    let mut path = Vec::with_capacity(m_steps * x.len());
    for k in 1..=m_steps {
        let alpha = k as f64 / m_steps as f64;
        path.extend(baseline.iter().zip(&delta).map(|(b, d)| b + alpha * d));
    }

    let mut tape = Tape::new();
    let params = model.bind(&mut tape);
    let points = tape.leaf(Tensor::new(vec![m_steps, x.len()], path)?, true);
    let logits = model.forward(&mut tape, &params, points)?;
    let picked = tape.column(logits, class)?;
    let total = tape.sum(picked);
    tape.backward(total)?;
    let grads = tape.grad(points).expect("path points require grad");

    let mut avg = vec![0.0; x.len()];
    for row in grads.iter_rows() {
        for (a, g) in avg.iter_mut().zip(row) {
            *a += g;
        }
    }
    Ok(avg
        .iter()
        .zip(&delta)
        .map(|(a, d)| d * a / m_steps as f64)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionSample {
    /// Class whose logit is attributed: the refined pseudo-label.
    pub class: usize,
    /// `Σ_i IG_i`
    pub attribution_sum: f64,
    /// `g(u)_c − g(I)_c`
    pub logit_gap: f64,
    pub residual: f64,
}

/// Numerical check of the integrated-gradients term in the consistency gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub samples: Vec<AttributionSample>,
    pub max_residual: f64,
    /// `−Σ_b (Σ_i IG_i(u_b)) ∇_θ g(u_b)_{c_b}`
    pub integrated_term: GradientVector,
    /// `∇_θ L_Con` with refined hard pseudo-labels on the same inputs.
    pub consistency_gradient: GradientVector,
    pub cosine: f64,
}

impl DecompositionReport {
    pub fn holds(&self, tolerance: f64) -> bool {
        self.max_residual < tolerance
    }
}

/// For each input, attributes the logit of its refined pseudo-label class
/// and checks completeness `Σ_i IG_i = g(u)_c − g(I)_c`. Also reports the
/// integrated-gradients term alongside the consistency-loss gradient.
pub fn verify_ig_decomposition(
    model: &Mlp,
    inputs: &[Vec<f64>],
    baseline: &BaselineInput,
    m_steps: usize,
) -> Result<DecompositionReport> {
    if inputs.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let x = Tensor::from_rows(inputs)?;
    let logits = model.logits(&x)?;
    let base = model.logits_one(&baseline.vector)?;

    let mut samples = Vec::with_capacity(inputs.len());
    for (u, row) in inputs.iter().zip(logits.iter_rows()) {
        let refined: Vec<f64> = row.iter().zip(&base).map(|(g, b)| g - b).collect();
        let class = argmax(&refined);
        let ig = integrated_gradients(model, u, &baseline.vector, class, m_steps)?;
        let attribution_sum: f64 = ig.iter().sum();
        let logit_gap = refined[class];
        samples.push(AttributionSample {
            class,
            attribution_sum,
            logit_gap,
            residual: (attribution_sum - logit_gap).abs(),
        });
    }
    let max_residual = samples.iter().map(|s| s.residual).fold(0.0, f64::max);

    // Σ_b S_b ∇_θ g(u_b)_{c_b} via a weighted sum of the logit matrix.
    let classes = model.classes();
    let mut weights = vec![0.0; inputs.len() * classes];
    for (b, s) in samples.iter().enumerate() {
        weights[b * classes + s.class] = s.attribution_sum;
    }
    let mut tape = Tape::new();
    let params = model.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let out = model.forward(&mut tape, &params, xv)?;
    let w = tape.constant(Tensor::new(vec![inputs.len(), classes], weights)?);
    let weighted = tape.mul(out, w)?;
    let total = tape.sum(weighted);
    tape.backward(total)?;
    let integrated_term = params.gradient(&tape).scaled(-1.0);

    let refined_logits = {
        let mut data = logits.data().to_vec();
        for row in data.chunks_mut(classes) {
            for (v, b) in row.iter_mut().zip(&base) {
                *v -= b;
            }
        }
        Tensor::new(logits.shape().to_vec(), data)?
    };
    let pseudo = pseudo_label(&refined_logits, 0.0)?;
    let mut tape = Tape::new();
    let params = model.bind(&mut tape);
    let con = consistency_loss_on_views(&mut tape, model, &params, &x, &pseudo)?;
    tape.backward(con)?;
    let consistency_gradient = params.gradient(&tape);
    let cosine = integrated_term.cosine(&consistency_gradient)?;

    Ok(DecompositionReport {
        samples,
        max_residual,
        integrated_term,
        consistency_gradient,
        cosine,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Layer;

    fn linear_net() -> Mlp {
        Mlp::from_layers(vec![Layer {
            weight: Tensor::new(vec![3, 2], vec![1.0, -2.0, 0.5, 3.0, -1.5, 0.25]).unwrap(),
            bias: Tensor::new(vec![2], vec![0.3, -0.7]).unwrap(),
        }])
        .unwrap()
    }

    #[test]
    fn zero_path_gives_zero_attribution() {
        let net = Mlp::init(&[3, 8, 8, 2], 5).unwrap();
        let x = [0.4, -1.0, 2.0];
        let ig = integrated_gradients(&net, &x, &x, 1, 16).unwrap();
        assert!(ig.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_model_is_exact_for_any_m() {
        let net = linear_net();
        let x = [1.0, 2.0, -1.0];
        let base = [0.5, 0.0, 0.0];
        for m in [1, 3, 17] {
            let ig = integrated_gradients(&net, &x, &base, 1, m).unwrap();
            let expected = [-1.0, 6.0, -0.25];
            for (a, e) in ig.iter().zip(expected) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn completeness_on_deep_net() {
        let net = Mlp::init(&[5, 12, 12, 3], 77).unwrap();
        let x = [0.9, -0.3, 1.4, 0.2, -0.8];
        let base = [0.0; 5];
        for c in 0..3 {
            let ig = integrated_gradients(&net, &x, &base, c, 512).unwrap();
            let gap = net.logits_one(&x).unwrap()[c] - net.logits_one(&base).unwrap()[c];
            assert!((ig.iter().sum::<f64>() - gap).abs() < 1e-3);
        }
    }

    #[test]
    fn ig_errors() {
        let net = linear_net();
        assert!(integrated_gradients(&net, &[1.0; 3], &[0.0; 3], 0, 0).is_err());
        assert!(integrated_gradients(&net, &[1.0; 3], &[0.0; 2], 0, 4).is_err());
        assert!(integrated_gradients(&net, &[1.0; 3], &[0.0; 3], 2, 4).is_err());
    }

    #[test]
    fn decomposition_report_linear_and_identity_cases() {
        let net = linear_net();
        let inputs = vec![vec![1.0, 2.0, -1.0], vec![-0.5, 0.1, 0.9]];
        let report = verify_ig_decomposition(&net, &inputs, &BaselineInput::black(3), 1).unwrap();
        assert!(report.max_residual < 1e-10);
        assert!(report.holds(1e-10));
        assert_eq!(report.integrated_term.len(), net.num_params());

        let same = BaselineInput { name: "self".into(), vector: vec![0.3, 0.3, 0.3] };
        let report = verify_ig_decomposition(&net, &[vec![0.3, 0.3, 0.3]], &same, 8).unwrap();
        assert_eq!(report.samples[0].attribution_sum, 0.0);
    }
}
