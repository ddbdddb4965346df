//! Class-balanced evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if counts.iter().any(|r| r.len() != c) {
            return Err(Error::Dimension("confusion matrix must be square".into()));
        }
        Ok(Self { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Per-class recall; errors if any class has no samples.
    pub fn recalls(&self) -> Result<Vec<f64>> {
        (0..self.classes())
            .map(|c| {
                let n = self.row_sum(c);
                if n == 0 {
                    Err(Error::UndefinedClass(c))
                } else {
                    Ok(self.counts[c][c] as f64 / n as f64)
                }
            })
            .collect()
    }

    /// Plain accuracy, for contrast with the balanced metrics.
    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..self.classes()).map(|c| self.counts[c][c]).sum();
        correct as f64 / self.total().max(1) as f64
    }

    /// CSV grid, one row per true class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for c in 0..self.classes() {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
        for (t, row) in self.counts.iter().enumerate() {
            out.push_str(&t.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Tallies (true, predicted) pairs of zero-based labels.
pub fn confusion(true_labels: &[usize], predicted: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if true_labels.len() != predicted.len() {
        return Err(Error::Dimension(format!(
            "{} true labels but {} predictions",
            true_labels.len(),
            predicted.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (&t, &p) in true_labels.iter().zip(predicted) {
        if t >= classes || p >= classes {
            return Err(Error::Label(format!("pair ({t}, {p}) outside 0..{classes}")));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

/// Balanced accuracy: mean per-class recall.
pub fn bacc(cm: &ConfusionMatrix) -> Result<f64> {
    let r = cm.recalls()?;
    Ok(r.iter().sum::<f64>() / r.len() as f64)
}

/// Geometric mean of per-class recalls. Exactly 0 if any recall is 0.
pub fn gm(cm: &ConfusionMatrix) -> Result<f64> {
    let r = cm.recalls()?;
    if r.contains(&0.0) {
        return Ok(0.0);
    }
    let mean_log = r.iter().map(|v| v.ln()).sum::<f64>() / r.len() as f64;
    Ok(mean_log.exp())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub head_median: f64,
    pub tail_median: f64,
    pub decreasing: bool,
}

/// Compares the median of the first `head_frac` of a series with the median
/// of its last `tail_frac`. Each window holds at least one element.
pub fn trajectory_trend(series: &[f64], head_frac: f64, tail_frac: f64) -> Result<Trend> {
    if series.is_empty() {
        return Err(Error::Contract("trend of an empty series".into()));
    }
    for f in [head_frac, tail_frac] {
        if !(f > 0.0 && f <= 0.5) {
            return Err(Error::Contract(format!("window fraction must lie in (0, 0.5], got {f}")));
        }
    }
    let window = |f: f64| ((f * series.len() as f64).ceil() as usize).clamp(1, series.len());
    let head_median = median(&series[..window(head_frac)]);
    let tail_median = median(&series[series.len() - window(tail_frac)..]);
    Ok(Trend {
        head_median,
        tail_median,
        decreasing: tail_median < head_median,
    })
}

/// Mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStderr {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

pub fn mean_stderr(values: &[f64]) -> MeanStderr {
    let n = values.len();
    if n == 0 {
        return MeanStderr { mean: f64::NAN, stderr: f64::NAN, n };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let stderr = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    MeanStderr { mean, stderr, n }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn confusion_examples() {
        let cm = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(cm.counts(), &[vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        assert_eq!(confusion(&[], &[], 2).unwrap(), ConfusionMatrix::zeros(2));
        let cm = confusion(&[0, 0, 1, 1, 1], &[0, 1, 1, 1, 0], 2).unwrap();
        assert_eq!(cm.counts(), &[vec![1, 1], vec![1, 2]]);
        assert!(matches!(confusion(&[0, 2], &[0, 1], 2), Err(Error::Label(_))));
        assert!(matches!(confusion(&[0], &[0, 1], 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn bacc_gm_examples() {
        let diag = ConfusionMatrix::from_counts(vec![vec![4, 0], vec![0, 9]]).unwrap();
        assert_eq!(bacc(&diag).unwrap(), 1.0);
        assert_eq!(gm(&diag).unwrap(), 1.0);
        let cm = ConfusionMatrix::from_counts(vec![vec![5, 0], vec![2, 3]]).unwrap();
        assert!((bacc(&cm).unwrap() - 0.8).abs() < 1e-15);
        assert!((gm(&cm).unwrap() - 0.6f64.sqrt()).abs() < 1e-15);
        let dead = ConfusionMatrix::from_counts(vec![vec![5, 0], vec![4, 0]]).unwrap();
        assert_eq!(gm(&dead).unwrap(), 0.0);
        let empty = ConfusionMatrix::from_counts(vec![vec![5, 0], vec![0, 0]]).unwrap();
        assert!(matches!(bacc(&empty), Err(Error::UndefinedClass(1))));
        assert!(matches!(gm(&empty), Err(Error::UndefinedClass(1))));
    }

    #[test]
    fn chance_level_bacc() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let truth: Vec<usize> = (0..10_000).map(|i| i % 10).collect();
        let pred: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..10)).collect();
        let b = bacc(&confusion(&truth, &pred, 10).unwrap()).unwrap();
        assert!((b - 0.1).abs() < 0.02, "{b}");
    }

    #[test]
    fn bacc_ignores_class_duplication() {
        let cm = ConfusionMatrix::from_counts(vec![vec![8, 2], vec![1, 1]]).unwrap();
        let doubled = ConfusionMatrix::from_counts(vec![vec![16, 4], vec![1, 1]]).unwrap();
        assert_eq!(bacc(&cm).unwrap(), bacc(&doubled).unwrap());
        assert_ne!(cm.accuracy(), doubled.accuracy());
    }

    #[test]
    fn trend_examples() {
        assert!(!trajectory_trend(&[2.0; 10], 0.1, 0.1).unwrap().decreasing);
        let dec: Vec<f64> = (0..20).map(|i| 20.0 - i as f64).collect();
        assert!(trajectory_trend(&dec, 0.1, 0.1).unwrap().decreasing);
        let t = trajectory_trend(&[5.0, 4.0, 3.0, 2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0], 0.1, 0.1).unwrap();
        assert_eq!((t.head_median, t.tail_median, t.decreasing), (5.0, 1.0, true));
        assert!(trajectory_trend(&[], 0.1, 0.1).is_err());
        assert!(trajectory_trend(&[1.0], 0.6, 0.1).is_err());
    }

    #[test]
    fn mean_stderr_values() {
        let m = mean_stderr(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.stderr - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_stderr(&[4.0]).stderr, 0.0);
    }

    proptest! {
        #[test]
        fn gm_never_exceeds_bacc(counts in proptest::collection::vec(0u64..50, 16)) {
            let rows: Vec<Vec<u64>> = counts
                .chunks(4)
                .enumerate()
                .map(|(i, r)| {
                    let mut r = r.to_vec();
                    r[i] += 1; // every class non-empty
                    r
                })
                .collect();
            let cm = ConfusionMatrix::from_counts(rows).unwrap();
            prop_assert!(gm(&cm).unwrap() <= bacc(&cm).unwrap() + 1e-15);
        }
    }
}
