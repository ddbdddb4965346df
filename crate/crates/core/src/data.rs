//! Synthetic long-tailed Gaussian-mixture data.
//!
//! Labels are zero-based: class `0` is the head (largest) class and class
//! `C−1` the tail, unless the unlabeled split is reversed.
//!
//! Training code only ever sees a [`TrainingView`], which has no route to the
//! hidden labels of the unlabeled pool. Those are exposed through
//! [`EvaluationView`] alone.

use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-class sample counts `round(n_max · γ^(−c/(C−1)))` for `c = 0..C`.
///
/// The first count is `n_max` and the last `round(n_max / γ)`; `reversed`
/// flips the order so the smallest class comes first.
pub fn longtail_counts(classes: usize, n_max: usize, gamma: f64, reversed: bool) -> Result<Vec<usize>> {
    if classes < 2 {
        return Err(Error::InfeasibleSpec(format!("need at least 2 classes, got {classes}")));
    }
    if !(gamma >= 1.0) || !gamma.is_finite() {
        return Err(Error::InfeasibleSpec(format!("imbalance ratio must be ≥ 1, got {gamma}")));
    }
    if (n_max as f64) < gamma {
        return Err(Error::InfeasibleSpec(format!(
            "largest class size {n_max} is below the imbalance ratio {gamma}; the tail class would be empty"
        )));
    }
    let last = (classes - 1) as f64;
    let mut counts: Vec<usize> = (0..classes)
        .map(|c| (n_max as f64 * gamma.powf(-(c as f64) / last)).round() as usize)
        .collect();
    if reversed {
        counts.reverse();
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongTailSpec {
    pub classes: usize,
    pub dim: usize,
    /// Largest labeled class size (N₁).
    pub n_max: usize,
    /// Largest unlabeled class size (M₁).
    pub m_max: usize,
    pub gamma_l: f64,
    pub gamma_u: f64,
    pub reversed_unlabeled: bool,
    pub seed: u64,
    pub class_separation: f64,
    pub noise_sigma: f64,
    /// Size of each class in the balanced test split.
    pub test_per_class: usize,
}

impl Default for LongTailSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 32,
            n_max: 300,
            m_max: 600,
            gamma_l: 100.0,
            gamma_u: 100.0,
            reversed_unlabeled: false,
            seed: 0,
            class_separation: 3.0,
            noise_sigma: 1.0,
            test_per_class: 200,
        }
    }
}

impl LongTailSpec {
    pub fn labeled_counts(&self) -> Result<Vec<usize>> {
        longtail_counts(self.classes, self.n_max, self.gamma_l, false)
    }

    pub fn unlabeled_counts(&self) -> Result<Vec<usize>> {
        longtail_counts(self.classes, self.m_max, self.gamma_u, self.reversed_unlabeled)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Dimension(format!("feature dimension must be ≥ 2, got {}", self.dim)));
        }
        if !(self.noise_sigma >= 0.0) || !(self.class_separation > 0.0) {
            return Err(Error::InfeasibleSpec(format!(
                "need noise_sigma ≥ 0 and class_separation > 0, got {} and {}",
                self.noise_sigma, self.class_separation
            )));
        }
        if self.test_per_class == 0 {
            return Err(Error::InfeasibleSpec("test_per_class must be ≥ 1".into()));
        }
        self.labeled_counts()?;
        self.unlabeled_counts()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    pub y: usize,
}

/// A materialized dataset. Immutable after [`synthesize`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    classes: usize,
    dim: usize,
    labeled: Vec<LabeledSample>,
    unlabeled: Vec<Vec<f64>>,
    hidden_unlabeled_labels: Vec<usize>,
    test: Vec<LabeledSample>,
    class_means: Vec<Vec<f64>>,
}

/// Everything a training step may read.
#[derive(Debug, Clone, Copy)]
pub struct TrainingView<'a> {
    pub classes: usize,
    pub dim: usize,
    pub labeled: &'a [LabeledSample],
    pub unlabeled: &'a [Vec<f64>],
}

impl TrainingView<'_> {
    /// Empirical class distribution of the labeled split.
    pub fn labeled_class_distribution(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.classes];
        for s in self.labeled {
            counts[s.y] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        counts.iter().map(|c| c / total).collect()
    }

    /// Largest absolute coordinate over all training inputs.
    pub fn max_abs_coordinate(&self) -> f64 {
        self.labeled
            .iter()
            .map(|s| s.x.as_slice())
            .chain(self.unlabeled.iter().map(Vec::as_slice))
            .flatten()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Held-out labels, used only for scoring.
#[derive(Debug, Clone, Copy)]
pub struct EvaluationView<'a> {
    pub test: &'a [LabeledSample],
    pub hidden_unlabeled_labels: &'a [usize],
}

impl SynthDataset {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_means(&self) -> &[Vec<f64>] {
        &self.class_means
    }

    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView {
            classes: self.classes,
            dim: self.dim,
            labeled: &self.labeled,
            unlabeled: &self.unlabeled,
        }
    }

    pub fn evaluation_view(&self) -> EvaluationView<'_> {
        EvaluationView {
            test: &self.test,
            hidden_unlabeled_labels: &self.hidden_unlabeled_labels,
        }
    }

    /// Reassembles a dataset from its parts (used by the binary importer).
    pub fn from_parts(
        classes: usize,
        dim: usize,
        labeled: Vec<LabeledSample>,
        unlabeled: Vec<Vec<f64>>,
        hidden_unlabeled_labels: Vec<usize>,
        test: Vec<LabeledSample>,
        class_means: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if hidden_unlabeled_labels.len() != unlabeled.len() {
            return Err(Error::Dimension(format!(
                "{} unlabeled samples but {} hidden labels",
                unlabeled.len(),
                hidden_unlabeled_labels.len()
            )));
        }
        if class_means.len() != classes {
            return Err(Error::Dimension(format!(
                "{} class means for {classes} classes",
                class_means.len()
            )));
        }
        let all_x = labeled
            .iter()
            .chain(&test)
            .map(|s| &s.x)
            .chain(&unlabeled)
            .chain(&class_means);
        for x in all_x {
            if x.len() != dim {
                return Err(Error::Dimension(format!("vector of length {} in a {dim}-d dataset", x.len())));
            }
        }
        let labels = labeled.iter().chain(&test).map(|s| s.y).chain(hidden_unlabeled_labels.iter().copied());
        for y in labels {
            if y >= classes {
                return Err(Error::Label(format!("label {y} outside 0..{classes}")));
            }
        }
        Ok(Self {
            classes,
            dim,
            labeled,
            unlabeled,
            hidden_unlabeled_labels,
            test,
            class_means,
        })
    }
}

/// Class means at pairwise distance `separation`: an orthonormal frame scaled
/// by `separation/√2` when `C ≤ d`, otherwise random directions on the same sphere.
fn place_means(classes: usize, dim: usize, separation: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let radius = separation / std::f64::consts::SQRT_2;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while basis.len() < classes {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if classes <= dim {
            for b in &basis {
                let proj: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= proj * bi;
                }
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        basis.push(v.into_iter().map(|a| a / norm).collect());
    }
    basis
        .into_iter()
        .map(|b| b.into_iter().map(|a| a * radius).collect())
        .collect()
}

fn draw(mean: &[f64], noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    mean.iter().map(|m| m + noise.sample(rng)).collect()
}

/// Materializes `spec`. Deterministic in `spec.seed`.
pub fn synthesize(spec: &LongTailSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = place_means(spec.classes, spec.dim, spec.class_separation, &mut rng);
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::InfeasibleSpec(format!("noise_sigma: {e}")))?;

    let mut labeled = Vec::new();
    for (c, &n) in spec.labeled_counts()?.iter().enumerate() {
        for _ in 0..n {
            labeled.push(LabeledSample { x: draw(&means[c], &noise, &mut rng), y: c });
        }
    }
    let mut unlabeled = Vec::new();
    let mut hidden = Vec::new();
    for (c, &m) in spec.unlabeled_counts()?.iter().enumerate() {
        for _ in 0..m {
            unlabeled.push(draw(&means[c], &noise, &mut rng));
            hidden.push(c);
        }
    }
    let mut test = Vec::new();
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..spec.test_per_class {
            test.push(LabeledSample { x: draw(mean, &noise, &mut rng), y: c });
        }
    }
    SynthDataset::from_parts(spec.classes, spec.dim, labeled, unlabeled, hidden, test, means)
}

/// Noise scales for the weak (α) and strong (A) views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub sigma_weak: f64,
    pub sigma_strong: f64,
    pub mask_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            sigma_weak: 0.1,
            sigma_strong: 0.5,
            mask_fraction: 0.25,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(Error::Contract(format!(
                "mask_fraction must lie in [0, 1), got {}",
                self.mask_fraction
            )));
        }
        if !(self.sigma_weak >= 0.0) || !(self.sigma_strong >= 0.0) {
            return Err(Error::Contract("augmentation noise scales must be ≥ 0".into()));
        }
        if self.sigma_weak > self.sigma_strong {
            return Err(Error::Contract(format!(
                "weak noise {} exceeds strong noise {}",
                self.sigma_weak, self.sigma_strong
            )));
        }
        Ok(())
    }

    /// Number of coordinates the strong view zeroes in a `dim`-vector.
    pub fn masked_count(&self, dim: usize) -> usize {
        ((self.mask_fraction * dim as f64).round() as usize).min(dim)
    }
}

fn add_noise<R: Rng + ?Sized>(x: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    if sigma == 0.0 {
        return x.to_vec();
    }
    x.iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(rng);
            v + sigma * z
        })
        .collect()
}

/// Weak view: `x + N(0, σ_weak²)`.
pub fn weak_aug<R: Rng + ?Sized>(x: &[f64], cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    add_noise(x, cfg.sigma_weak, rng)
}

/// Strong view: `x + N(0, σ_strong²)` with a uniformly chosen subset of
/// `round(mask_fraction · d)` coordinates zeroed.
pub fn strong_aug<R: Rng + ?Sized>(x: &[f64], cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    let mut out = add_noise(x, cfg.sigma_strong, rng);
    let k = cfg.masked_count(x.len());
    if k > 0 {
        for i in index::sample(rng, x.len(), k) {
            out[i] = 0.0;
        }
    }
    out
}

/// Indices into the labeled and unlabeled splits for one training step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Minibatch {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Draws `batch_size` labeled and `mu · batch_size` unlabeled indices, each
/// without replacement within the batch.
pub fn sample_minibatch<R: Rng + ?Sized>(
    view: &TrainingView<'_>,
    batch_size: usize,
    mu: usize,
    rng: &mut R,
) -> Result<Minibatch> {
    if batch_size == 0 {
        return Err(Error::Sampling("batch size must be ≥ 1".into()));
    }
    let n_unlabeled = batch_size * mu;
    if batch_size > view.labeled.len() {
        return Err(Error::Sampling(format!(
            "labeled batch of {batch_size} exceeds the {} labeled samples",
            view.labeled.len()
        )));
    }
    if n_unlabeled > view.unlabeled.len() {
        return Err(Error::Sampling(format!(
            "unlabeled batch of {n_unlabeled} exceeds the {} unlabeled samples",
            view.unlabeled.len()
        )));
    }
    Ok(Minibatch {
        labeled: index::sample(rng, view.labeled.len(), batch_size).into_vec(),
        unlabeled: index::sample(rng, view.unlabeled.len(), n_unlabeled).into_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> LongTailSpec {
        LongTailSpec {
            classes: 2,
            dim: 4,
            n_max: 10,
            m_max: 20,
            gamma_l: 1.0,
            gamma_u: 1.0,
            seed: 7,
            test_per_class: 5,
            ..LongTailSpec::default()
        }
    }

    #[test]
    fn longtail_examples() {
        assert_eq!(longtail_counts(10, 1500, 1.0, false).unwrap(), vec![1500; 10]);
        let counts = longtail_counts(10, 1500, 100.0, false).unwrap();
        assert_eq!(counts, vec![1500, 899, 539, 323, 194, 116, 70, 42, 25, 15]);
        assert_eq!(longtail_counts(2, 100, 4.0, true).unwrap(), vec![25, 100]);
    }

    #[test]
    fn longtail_errors() {
        assert!(matches!(longtail_counts(10, 50, 100.0, false), Err(Error::InfeasibleSpec(_))));
        assert!(matches!(longtail_counts(10, 50, 0.5, false), Err(Error::InfeasibleSpec(_))));
        assert!(matches!(longtail_counts(1, 50, 1.0, false), Err(Error::InfeasibleSpec(_))));
    }

    #[test]
    fn synthesize_is_deterministic() {
        let a = synthesize(&small_spec()).unwrap();
        let b = synthesize(&small_spec()).unwrap();
        assert_eq!(a, b);
        let c = synthesize(&LongTailSpec { seed: 8, ..small_spec() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthesize_rejects_one_dim() {
        let spec = LongTailSpec { dim: 1, ..small_spec() };
        assert!(matches!(synthesize(&spec), Err(Error::Dimension(_))));
    }

    #[test]
    fn split_counts_follow_their_own_ratio() {
        let spec = LongTailSpec {
            classes: 10,
            dim: 16,
            n_max: 300,
            m_max: 400,
            gamma_l: 100.0,
            gamma_u: 1.0,
            ..LongTailSpec::default()
        };
        let ds = synthesize(&spec).unwrap();
        let view = ds.training_view();
        let mut lab = vec![0; 10];
        for s in view.labeled {
            lab[s.y] += 1;
        }
        assert_eq!(lab, spec.labeled_counts().unwrap());
        let mut unl = vec![0; 10];
        for &y in ds.evaluation_view().hidden_unlabeled_labels {
            unl[y] += 1;
        }
        assert_eq!(unl, vec![400; 10]);
        assert_eq!(ds.evaluation_view().hidden_unlabeled_labels.len(), view.unlabeled.len());
    }

    #[test]
    fn means_are_equidistant_when_classes_fit() {
        let spec = LongTailSpec { classes: 5, dim: 8, class_separation: 4.0, ..small_spec() };
        let ds = synthesize(&spec).unwrap();
        let m = ds.class_means();
        for i in 0..5 {
            for j in 0..i {
                let d: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!((d - 4.0).abs() < 1e-9, "{d}");
            }
        }
    }

    #[test]
    fn sample_means_converge() {
        let spec = LongTailSpec {
            classes: 3,
            dim: 6,
            n_max: 600,
            m_max: 10,
            gamma_l: 1.0,
            gamma_u: 1.0,
            noise_sigma: 0.8,
            seed: 11,
            ..LongTailSpec::default()
        };
        let ds = synthesize(&spec).unwrap();
        for c in 0..3 {
            let xs: Vec<&LabeledSample> = ds.training_view().labeled.iter().filter(|s| s.y == c).collect();
            let n = xs.len() as f64;
            let bound = 3.0 * spec.noise_sigma / n.sqrt();
            for k in 0..6 {
                let avg = xs.iter().map(|s| s.x[k]).sum::<f64>() / n;
                assert!((avg - ds.class_means()[c][k]).abs() < bound);
            }
        }
    }

    #[test]
    fn augmentation_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (1..=10).map(f64::from).collect();
        let id = AugmentConfig { sigma_weak: 0.0, sigma_strong: 0.0, mask_fraction: 0.0 };
        assert_eq!(weak_aug(&x, &id, &mut rng), x);
        assert_eq!(strong_aug(&x, &id, &mut rng), x);

        let cfg = AugmentConfig { sigma_weak: 0.1, sigma_strong: 0.3, mask_fraction: 0.5 };
        for _ in 0..50 {
            let s = strong_aug(&x, &cfg, &mut rng);
            assert_eq!(s.iter().filter(|v| **v == 0.0).count(), 5);
        }
    }

    #[test]
    fn weak_noise_scale_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let cfg = AugmentConfig { sigma_weak: 0.4, sigma_strong: 1.0, mask_fraction: 0.0 };
        let x = [1.5];
        let draws: Vec<f64> = (0..10_000).map(|_| weak_aug(&x, &cfg, &mut rng)[0] - x[0]).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!((var.sqrt() - 0.4).abs() < 0.05 * 0.4);
    }

    #[test]
    fn augment_config_validation() {
        assert!(AugmentConfig { mask_fraction: 1.0, ..AugmentConfig::default() }.validate().is_err());
        assert!(AugmentConfig { sigma_weak: 2.0, sigma_strong: 1.0, mask_fraction: 0.0 }.validate().is_err());
        assert!(AugmentConfig::default().validate().is_ok());
    }

    #[test]
    fn minibatch_contracts() {
        let ds = synthesize(&small_spec()).unwrap();
        let view = ds.training_view();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = sample_minibatch(&view, 4, 2, &mut rng).unwrap();
        assert_eq!(b.labeled.len(), 4);
        assert_eq!(b.unlabeled.len(), 8);
        let mut u = b.unlabeled.clone();
        u.sort_unstable();
        u.dedup();
        assert_eq!(u.len(), 8);

        let replay = sample_minibatch(&view, 4, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(b, replay);

        assert!(matches!(sample_minibatch(&view, 21, 1, &mut rng), Err(Error::Sampling(_))));
        assert!(matches!(sample_minibatch(&view, 4, 11, &mut rng), Err(Error::Sampling(_))));
        assert!(matches!(sample_minibatch(&view, 0, 1, &mut rng), Err(Error::Sampling(_))));
    }

    #[test]
    fn minibatch_head_frequency_monte_carlo() {
        let spec = LongTailSpec {
            classes: 10,
            dim: 4,
            n_max: 300,
            m_max: 300,
            gamma_l: 100.0,
            gamma_u: 1.0,
            ..LongTailSpec::default()
        };
        let ds = synthesize(&spec).unwrap();
        let view = ds.training_view();
        let expected = 300.0 / view.labeled.len() as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut head, mut total) = (0usize, 0usize);
        for _ in 0..10_000 {
            let b = sample_minibatch(&view, 16, 1, &mut rng).unwrap();
            head += b.labeled.iter().filter(|&&i| view.labeled[i].y == 0).count();
            total += b.labeled.len();
        }
        let freq = head as f64 / total as f64;
        assert!((freq - expected).abs() < 0.02, "{freq} vs {expected}");
    }
}
