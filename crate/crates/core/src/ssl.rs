//! FixMatch-style losses and ReMixMatch's distribution alignment / sharpening.

use rand::Rng;

use crate::data::{strong_aug, AugmentConfig};
use crate::error::{Error, Result};
use crate::model::{argmax, BoundParams, Mlp};
use crate::tensor::{cross_entropy, softmax_row, soft_cross_entropy, Tape, Tensor, Var};

/// Floor applied to the running average in [`distribution_alignment`].
pub const ALIGNMENT_FLOOR: f64 = 1e-8;

/// Pseudo-labels derived from weak-view logits.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelBatch {
    pub hard_labels: Vec<usize>,
    pub confidences: Vec<f64>,
    pub mask: Vec<bool>,
    /// Aligned and sharpened targets, when the soft-label backbone is used.
    pub soft_labels: Option<Vec<Vec<f64>>>,
}

impl PseudoLabelBatch {
    pub fn len(&self) -> usize {
        self.hard_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard_labels.is_empty()
    }

    pub fn active(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Replaces the hard targets with soft distributions, one per row.
    pub fn with_soft_labels(mut self, soft: Vec<Vec<f64>>) -> Result<Self> {
        if soft.len() != self.len() {
            return Err(Error::Dimension(format!(
                "{} soft labels for {} pseudo-labels",
                soft.len(),
                self.len()
            )));
        }
        self.soft_labels = Some(soft);
        Ok(self)
    }

    /// Target matrix with masked-out rows zeroed.
    fn targets(&self, classes: usize) -> Result<Tensor> {
        let mut data = vec![0.0; self.len() * classes];
        for i in 0..self.len() {
            if !self.mask[i] {
                continue;
            }
            let row = &mut data[i * classes..(i + 1) * classes];
            match &self.soft_labels {
                Some(soft) => {
                    if soft[i].len() != classes {
                        return Err(Error::Dimension(format!(
                            "soft label {i} has {} entries for {classes} classes",
                            soft[i].len()
                        )));
                    }
                    row.copy_from_slice(&soft[i]);
                }
                None => {
                    let y = self.hard_labels[i];
                    if y >= classes {
                        return Err(Error::Label(format!("pseudo-label {y} outside 0..{classes}")));
                    }
                    row[y] = 1.0;
                }
            }
        }
        Tensor::new(vec![self.len(), classes], data)
    }
}

/// Softmax → confidence and argmax per row; rows below `tau` are masked out.
/// `tau = 0` keeps every row.
pub fn pseudo_label(logits_weak: &Tensor, tau: f64) -> Result<PseudoLabelBatch> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Contract(format!("confidence threshold must lie in [0, 1], got {tau}")));
    }
    if logits_weak.cols() < 2 {
        return Err(Error::Dimension("pseudo-labels need at least 2 classes".into()));
    }
    let mut hard_labels = Vec::with_capacity(logits_weak.rows());
    let mut confidences = Vec::with_capacity(logits_weak.rows());
    for row in logits_weak.iter_rows() {
        let q = softmax_row(row);
        let c = argmax(&q);
        hard_labels.push(c);
        confidences.push(q[c]);
    }
    let mask = confidences.iter().map(|&c| tau == 0.0 || c >= tau).collect();
    Ok(PseudoLabelBatch {
        hard_labels,
        confidences,
        mask,
        soft_labels: None,
    })
}

/// Mean cross-entropy on (already weakly augmented) labeled inputs.
pub fn supervised_loss(
    tape: &mut Tape,
    model: &Mlp,
    params: &BoundParams,
    inputs: &Tensor,
    labels: &[usize],
) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Contract("supervised loss on an empty batch".into()));
    }
    let x = tape.constant(inputs.clone());
    let logits = model.forward(tape, params, x)?;
    cross_entropy(tape, logits, labels)
}

/// Consistency loss on given strong views:
/// `(1/n) Σ_i mask_i · H(target_i, softmax(g(A(u_i))))`.
///
/// With every row masked out the result is a constant zero, so it carries no
/// gradient.
pub fn consistency_loss_on_views(
    tape: &mut Tape,
    model: &Mlp,
    params: &BoundParams,
    strong_views: &Tensor,
    pseudo: &PseudoLabelBatch,
) -> Result<Var> {
    if strong_views.rows() != pseudo.len() {
        return Err(Error::Dimension(format!(
            "{} strong views for {} pseudo-labels",
            strong_views.rows(),
            pseudo.len()
        )));
    }
    if pseudo.active() == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)?));
    }
    let x = tape.constant(strong_views.clone());
    let logits = model.forward(tape, params, x)?;
    let targets = pseudo.targets(model.classes())?;
    soft_cross_entropy(tape, logits, &targets, pseudo.len() as f64)
}

/// Draws strong views of `unlabeled` with `rng` and records the consistency
/// loss against `pseudo`.
pub fn consistency_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    model: &Mlp,
    params: &BoundParams,
    unlabeled: &[&[f64]],
    pseudo: &PseudoLabelBatch,
    augment: &AugmentConfig,
    rng: &mut R,
) -> Result<Var> {
    let views: Vec<Vec<f64>> = unlabeled.iter().map(|u| strong_aug(u, augment, rng)).collect();
    let views = Tensor::from_rows(&views)?;
    consistency_loss_on_views(tape, model, params, &views, pseudo)
}

fn check_distribution(name: &str, p: &[f64], classes: usize) -> Result<()> {
    if p.len() != classes {
        return Err(Error::Dimension(format!("{name} has {} entries, expected {classes}", p.len())));
    }
    if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Contract(format!("{name} is not a distribution: {p:?}")));
    }
    Ok(())
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let total: f64 = v.iter().sum();
    for x in &mut v {
        *x /= total;
    }
    v
}

/// `q · target / running_avg`, renormalized. The running average is floored
/// at [`ALIGNMENT_FLOOR`].
pub fn distribution_alignment(q: &[f64], running_avg: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    check_distribution("q", q, q.len())?;
    check_distribution("running average", running_avg, q.len())?;
    check_distribution("target", target, q.len())?;
    Ok(normalize(
        q.iter()
            .zip(running_avg)
            .zip(target)
            .map(|((qi, ri), ti)| qi * ti / ri.max(ALIGNMENT_FLOOR))
            .collect(),
    ))
}

/// `q^(1/T)`, renormalized.
pub fn sharpen(q: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::Contract(format!("temperature must be > 0, got {temperature}")));
    }
    check_distribution("q", q, q.len())?;
    if temperature == 1.0 {
        return Ok(q.to_vec());
    }
    let inv = 1.0 / temperature;
    Ok(normalize(q.iter().map(|v| v.powf(inv)).collect()))
}

/// Exponential moving average of predicted class distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionEma {
    average: Vec<f64>,
    decay: f64,
}

impl DistributionEma {
    /// Starts from the uniform distribution.
    pub fn new(classes: usize, decay: f64) -> Self {
        Self {
            average: vec![1.0 / classes as f64; classes],
            decay,
        }
    }

    pub fn average(&self) -> &[f64] {
        &self.average
    }

    /// Folds in the batch-mean of `probs`.
    pub fn update(&mut self, probs: &[Vec<f64>]) {
        if probs.is_empty() {
            return;
        }
        let n = probs.len() as f64;
        for (c, avg) in self.average.iter_mut().enumerate() {
            let mean = probs.iter().map(|p| p[c]).sum::<f64>() / n;
            *avg = self.decay * *avg + (1.0 - self.decay) * mean;
        }
    }
}
