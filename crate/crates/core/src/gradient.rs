//! Flattened parameter-space gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A gradient over all model parameters in canonical order, with its
/// Euclidean norm cached at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector {
    values: Vec<f64>,
    norm: f64,
}

impl GradientVector {
    pub fn new(values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self { values, norm }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![0.0; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    fn check_len(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Dimension(format!(
                "gradient lengths differ: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_len(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    /// Cosine of the angle between two gradients; 0 when either is zero.
    pub fn cosine(&self, other: &Self) -> Result<f64> {
        let dot = self.dot(other)?;
        let denom = self.norm * other.norm;
        Ok(if denom > 0.0 { dot / denom } else { 0.0 })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_len(other)?;
        Ok(Self::new(
            self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
        ))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(self.values.iter().map(|v| v * factor).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Largest coordinate-wise relative error `|a−b| / max(|a|, |b|, floor)`.
    pub fn max_relative_error(&self, other: &Self, floor: f64) -> Result<f64> {
        self.check_len(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
            .fold(0.0, f64::max))
    }
}

impl From<Vec<f64>> for GradientVector {
    fn from(values: Vec<f64>) -> Self {
        Self::new(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_is_cached() {
        let g = GradientVector::new(vec![3.0, 4.0]);
        assert_eq!(g.norm(), 5.0);
        assert_eq!(g.scaled(2.0).norm(), 10.0);
    }

    #[test]
    fn length_mismatch() {
        let a = GradientVector::zeros(2);
        let b = GradientVector::zeros(3);
        assert!(matches!(a.dot(&b), Err(Error::Dimension(_))));
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn cosine_of_zero_is_zero() {
        let a = GradientVector::zeros(2);
        let b = GradientVector::new(vec![1.0, 1.0]);
        assert_eq!(a.cosine(&b).unwrap(), 0.0);
        let c = GradientVector::new(vec![-2.0, -2.0]);
        assert!((b.cosine(&c).unwrap() + 1.0).abs() < 1e-15);
    }
}
