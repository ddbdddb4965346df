use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{grad_b, grad_d, lcgc_combine, test_refine, BaselineColor, BaselineInput};
use crate::data::{sample_minibatch, weak_aug, AugmentConfig, LabeledSample, Minibatch, TrainingView};
use crate::error::{Error, Result};
use crate::gradient::GradientVector;
use crate::metrics::{bacc, confusion, gm, ConfusionMatrix};
use crate::model::Mlp;
use crate::ssl::{distribution_alignment, pseudo_label, sharpen, supervised_loss, DistributionEma};
use crate::tensor::{softmax_row, Tape, Tensor};

/// Pseudo-label flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    /// Hard argmax pseudo-labels.
    FixMatch,
    /// Distribution-aligned, sharpened soft pseudo-labels.
    RemixLite,
}

/// Which update rule drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Plain backbone: raw pseudo-labels, raw test logits.
    Baseline,
    /// Baseline-refined pseudo-labels and test logits, update along `G_b`.
    Cdmad,
    /// As `Cdmad`, with `G_b` replaced by the conflict projection.
    Lcgc,
}

macro_rules! enum_names {
    ($ty:ty, $what:literal, $($variant:path => $name:literal),+ $(,)?) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $($variant => $name),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::config(None, None, format!(
                        concat!("unknown ", $what, " `{}` (expected one of: {})"),
                        other,
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
    };
}

enum_names!(Backbone, "backbone", Backbone::FixMatch => "fixmatch", Backbone::RemixLite => "remix-lite");
enum_names!(Method, "method", Method::Baseline => "baseline", Method::Cdmad => "cdmad", Method::Lcgc => "lcgc");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcgcConfig {
    /// Projection strength λ ≥ 0.
    pub lambda: f64,
    pub refine_pseudo_labels: bool,
    pub refine_at_test: bool,
    pub baseline: BaselineColor,
    /// Riemann steps for integrated-gradients diagnostics.
    pub ig_steps: usize,
    /// Subtract the baseline logits twice at test time.
    pub double_subtract: bool,
}

impl Default for LcgcConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            refine_pseudo_labels: true,
            refine_at_test: true,
            baseline: BaselineColor::Black,
            ig_steps: 128,
            double_subtract: false,
        }
    }
}

impl LcgcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config(None, Some("lcgc.lambda"), format!("must be ≥ 0, got {}", self.lambda)));
        }
        if self.ig_steps == 0 {
            return Err(Error::config(None, Some("lcgc.ig_steps"), "must be ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub backbone: Backbone,
    pub method: Method,
    pub batch_size: usize,
    /// Unlabeled-to-labeled batch ratio μ.
    pub mu: usize,
    /// Confidence threshold τ; 0 disables masking.
    pub tau: f64,
    pub consistency_weight: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub sharpen_temperature: f64,
    pub ema_decay: f64,
    pub augment: AugmentConfig,
    pub lcgc: LcgcConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::FixMatch,
            method: Method::Lcgc,
            batch_size: 32,
            mu: 4,
            tau: 0.0,
            consistency_weight: 1.0,
            learning_rate: 0.05,
            steps: 2000,
            sharpen_temperature: 0.5,
            ema_decay: 0.99,
            augment: AugmentConfig::default(),
            lcgc: LcgcConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.mu == 0 {
            return Err(Error::config(None, Some("train.batch_size"), "batch size and mu must be ≥ 1"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config(None, Some("train.tau"), format!("must lie in [0, 1], got {}", self.tau)));
        }
        if !(self.learning_rate >= 0.0) || !(self.consistency_weight >= 0.0) {
            return Err(Error::config(None, Some("train.learning_rate"), "learning rate and consistency weight must be ≥ 0"));
        }
        if !(self.sharpen_temperature > 0.0) {
            return Err(Error::config(None, Some("train.sharpen_temperature"), "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config(None, Some("train.ema_decay"), "must lie in [0, 1)"));
        }
        self.augment
            .validate()
            .map_err(|e| Error::config(None, Some("augment"), e.to_string()))?;
        self.lcgc.validate()
    }

    /// Whether pseudo-labels come from refined logits.
    pub fn refines_pseudo_labels(&self) -> bool {
        self.method != Method::Baseline && self.lcgc.refine_pseudo_labels
    }

    /// Whether evaluation uses refined logits.
    pub fn refines_at_test(&self) -> bool {
        self.method != Method::Baseline && self.lcgc.refine_at_test
    }
}

/// Mutable state carried across steps.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub rng: ChaCha8Rng,
    pub ema: DistributionEma,
    pub step: usize,
}

impl TrainState {
    /// The stream is distinct from the one [`Mlp::init`] draws with the same seed.
    pub fn new(seed: u64, classes: usize, ema_decay: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            rng,
            ema: DistributionEma::new(classes, ema_decay),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub sup_loss: f64,
    pub con_loss: f64,
    pub kl_loss: f64,
    /// `G_d · G_b < 0`
    pub conflict: bool,
    pub cos_angle: f64,
}

/// One optimization step on `batch`:
///
/// 1. weak views and their logits; `G_d` from the KL loss;
/// 2. pseudo-labels from refined or raw weak logits (aligned and sharpened
///    for the soft-label backbone);
/// 3. `G_b` from the consistency loss, combined with `G_d` for [`Method::Lcgc`];
/// 4. add `∇ L_Sup` and take a gradient-descent step.
pub fn train_step(
    model: &mut Mlp,
    data: &TrainingView<'_>,
    batch: &Minibatch,
    cfg: &TrainConfig,
    baseline: &BaselineInput,
    state: &mut TrainState,
) -> Result<StepRecord> {
    let rng = &mut state.rng;
    let labeled: Vec<&LabeledSample> = batch.labeled.iter().map(|&i| &data.labeled[i]).collect();
    let unlabeled: Vec<&[f64]> = batch.unlabeled.iter().map(|&i| data.unlabeled[i].as_slice()).collect();

    let labeled_views: Vec<Vec<f64>> = labeled.iter().map(|s| weak_aug(&s.x, &cfg.augment, rng)).collect();
    let labels: Vec<usize> = labeled.iter().map(|s| s.y).collect();
    let weak_views: Vec<Vec<f64>> = unlabeled.iter().map(|u| weak_aug(u, &cfg.augment, rng)).collect();
    let weak_views = Tensor::from_rows(&weak_views)?;

    let debias = grad_d(model, &weak_views, baseline)?;
    let classes = model.classes();
    let pseudo_logits = if cfg.refines_pseudo_labels() {
        let mut data = debias.weak_logits.data().to_vec();
        for row in data.chunks_mut(classes) {
            for (v, b) in row.iter_mut().zip(&debias.baseline_logits) {
                *v -= b;
            }
        }
        Tensor::new(debias.weak_logits.shape().to_vec(), data)?
    } else {
        debias.weak_logits.clone()
    };
    let mut pseudo = pseudo_label(&pseudo_logits, cfg.tau)?;
    if cfg.backbone == Backbone::RemixLite {
        let probs: Vec<Vec<f64>> = pseudo_logits.iter_rows().map(softmax_row).collect();
        state.ema.update(&probs);
        let target = data.labeled_class_distribution();
        let soft = probs
            .iter()
            .map(|q| {
                let aligned = distribution_alignment(q, state.ema.average(), &target)?;
                sharpen(&aligned, cfg.sharpen_temperature)
            })
            .collect::<Result<Vec<_>>>()?;
        pseudo = pseudo.with_soft_labels(soft)?;
    }

    let (con_loss, gb) = grad_b(model, &unlabeled, &pseudo, &cfg.augment, rng)?;
    let gb = gb.scaled(cfg.consistency_weight);
    let gd = &debias.gradient;
    let direction = match cfg.method {
        Method::Baseline | Method::Cdmad => gb.clone(),
        Method::Lcgc => lcgc_combine(&gb, gd, cfg.lcgc.lambda)?,
    };

    let mut tape = Tape::new();
    let params = model.bind(&mut tape);
    let sup = supervised_loss(&mut tape, model, &params, &Tensor::from_rows(&labeled_views)?, &labels)?;
    tape.backward(sup)?;
    let sup_grad = params.gradient(&tape);

    let record = StepRecord {
        step: state.step,
        sup_loss: tape.value(sup).data()[0],
        con_loss,
        kl_loss: debias.loss,
        conflict: gd.dot(&gb)? < 0.0,
        cos_angle: gb.cosine(gd)?,
    };
    let update: GradientVector = direction.add(&sup_grad)?;
    if !update.is_finite() || !record.kl_loss.is_finite() || !record.con_loss.is_finite() {
        return Err(Error::NonFinite(format!("step {}: {record:?}", state.step)));
    }
    model.descend(&update, cfg.learning_rate)?;
    state.step += 1;
    Ok(record)
}

/// Runs `cfg.steps` steps with batches and augmentations drawn from `seed`.
pub fn train(
    model: &mut Mlp,
    data: &TrainingView<'_>,
    cfg: &TrainConfig,
    baseline: &BaselineInput,
    seed: u64,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    let mut state = TrainState::new(seed, model.classes(), cfg.ema_decay);
    let mut records = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch = sample_minibatch(data, cfg.batch_size, cfg.mu, &mut state.rng)?;
        records.push(train_step(model, data, &batch, cfg, baseline, &mut state)?);
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub bacc: f64,
    pub gm: f64,
    pub confusion: ConfusionMatrix,
}

/// Scores `model` on `samples`, optionally with baseline refinement.
pub fn evaluate(
    model: &Mlp,
    samples: &[LabeledSample],
    baseline: &BaselineInput,
    refine: bool,
    double_subtract: bool,
) -> Result<Evaluation> {
    let x = Tensor::from_rows(&samples.iter().map(|s| s.x.as_slice()).collect::<Vec<_>>())?;
    let preds = if refine {
        test_refine(model, &x, baseline, double_subtract)?.1
    } else {
        model.logits(&x)?.iter_rows().map(crate::model::argmax).collect()
    };
    let truth: Vec<usize> = samples.iter().map(|s| s.y).collect();
    let cm = confusion(&truth, &preds, model.classes())?;
    Ok(Evaluation {
        bacc: bacc(&cm)?,
        gm: gm(&cm)?,
        confusion: cm,
    })
}

/// Per-seed outcome of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub evaluation: Evaluation,
}

impl RunRecord {
    pub fn kl_trajectory(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.kl_loss).collect()
    }

    /// One CSV row per step.
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,sup_loss,con_loss,kl_loss,conflict,cos_angle\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{},{:e}\n",
                s.step, s.sup_loss, s.con_loss, s.kl_loss, u8::from(s.conflict), s.cos_angle
            ));
        }
        out
    }
}
