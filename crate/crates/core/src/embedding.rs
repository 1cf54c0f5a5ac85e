//! Unit-normalized dense text-embedding vectors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EmbeddingError {
    #[error("embedding has no values")]
    Empty,
    #[error("embedding contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("embedding has zero norm")]
    ZeroNorm,
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
}

/// Dense real vector normalized to unit Euclidean length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    /// Normalize raw values to unit length. Rejects empty, non-finite, and
    /// zero-norm inputs.
    pub fn normalized(values: Vec<f32>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(i));
        }
        let norm = values.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EmbeddingError::ZeroNorm);
        }
        let values = values.into_iter().map(|v| (v as f64 / norm) as f32).collect();
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Dot product, accumulated in f64.
    pub fn dot(&self, other: &EmbeddingVector) -> Result<f64, EmbeddingError> {
        if self.dim() != other.dim() {
            return Err(EmbeddingError::DimMismatch(self.dim(), other.dim()));
        }
        Ok(dot_f64(&self.values, &other.values))
    }

    pub fn norm(&self) -> f64 {
        dot_f64(&self.values, &self.values).sqrt()
    }
}

impl TryFrom<Vec<f32>> for EmbeddingVector {
    type Error = EmbeddingError;
    fn try_from(values: Vec<f32>) -> Result<Self, Self::Error> {
        EmbeddingVector::normalized(values)
    }
}

impl From<EmbeddingVector> for Vec<f32> {
    fn from(v: EmbeddingVector) -> Vec<f32> {
        v.values
    }
}

pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Deterministic pseudo-embedding for a text: a ChaCha8 stream keyed by
/// SHA-256(seed, text) drives standard-normal draws, then the vector is
/// normalized. Texts map to independent directions, so distances between
/// unrelated texts concentrate near 1.
pub fn hash_embedding(seed: u64, text: &str, dim: usize) -> EmbeddingVector {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(key);
    let values: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    EmbeddingVector::normalized(values).expect("normal draws are finite and nonzero")
}
