//! Exact nearest-neighbor search and canopy clustering over embeddings.
//!
//! The index is deliberately brute-force: a flat array of unit vectors
//! scanned in full for every query. Shortlists must be exactly the k nearest
//! items — the verification stage's guarantees lean on that — so approximate
//! structures are out of scope.

mod vecfile;

pub use vecfile::{read_vector_file, write_vector_file, MappedVectors};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::{dot_f64, EmbeddingError, EmbeddingVector};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("index is empty")]
    Empty,
    #[error("dimension mismatch: index holds {index_dim}, got {query_dim}")]
    DimMismatch { index_dim: usize, query_dim: usize },
    #[error("duplicate item id {0:?}")]
    DuplicateId(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("vector file error: {0}")]
    VecFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An id paired with its embedding, ready for indexing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexedItem {
    pub item_id: String,
    pub vector: EmbeddingVector,
}

/// One kNN hit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub item_id: String,
    pub distance: f64,
}

/// Cosine distance between unit vectors: `1 - <a, b>`, accumulated in f64.
/// Range is `[0, 2]`: 0 for identical directions, 1 for orthogonal, 2 for
/// opposite.
pub fn distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    Ok(1.0 - a.dot(b)?)
}

/// Flat exact-search index over unit vectors.
pub struct VectorIndex {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
}

impl VectorIndex {
    /// Build from items. All vectors must share one dimension and ids must
    /// be unique.
    pub fn build(items: Vec<IndexedItem>) -> Result<Self, IndexError> {
        let mut seen = std::collections::HashSet::new();
        let mut dim = 0usize;
        let mut ids = Vec::with_capacity(items.len());
        let mut data = Vec::new();
        for item in items {
            if dim == 0 {
                dim = item.vector.dim();
                data.reserve(dim * ids.capacity());
            } else if item.vector.dim() != dim {
                return Err(IndexError::DimMismatch {
                    index_dim: dim,
                    query_dim: item.vector.dim(),
                });
            }
            if !seen.insert(item.item_id.clone()) {
                return Err(IndexError::DuplicateId(item.item_id));
            }
            data.extend_from_slice(item.vector.values());
            ids.push(item.item_id);
        }
        Ok(Self { dim, ids, data })
    }

    /// Load from a vector file plus its id sidecar.
    pub fn open(vec_path: &std::path::Path, ids_path: &std::path::Path) -> Result<Self, IndexError> {
        let (dim, data) = read_vector_file(vec_path)?;
        let ids_raw = std::fs::read_to_string(ids_path)?;
        let ids: Vec<String> = ids_raw.lines().map(str::to_owned).collect();
        if dim != 0 && ids.len() != data.len() / dim {
            return Err(IndexError::VecFile(format!(
                "id sidecar holds {} ids but vector file holds {} rows",
                ids.len(),
                if dim == 0 { 0 } else { data.len() / dim }
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for id in &ids {
            if !seen.insert(id.clone()) {
                return Err(IndexError::DuplicateId(id.clone()));
            }
        }
        Ok(Self { dim, ids, data })
    }

    /// Persist as a vector file plus id sidecar (one id per line).
    pub fn save(&self, vec_path: &std::path::Path, ids_path: &std::path::Path) -> Result<(), IndexError> {
        write_vector_file(vec_path, self.dim, &self.data)?;
        let mut text = String::new();
        for id in &self.ids {
            text.push_str(id);
            text.push('\n');
        }
        std::fs::write(ids_path, text)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// The stored vector for row `i`.
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Exact k nearest neighbors of `query` by cosine distance.
    ///
    /// Results are sorted by (distance, item_id) ascending; ties at the
    /// k-boundary resolve by id, so the shortlist is fully deterministic.
    /// `k = 0` or an empty index yields an empty list; `k >= len` returns
    /// the whole index sorted.
    pub fn knn(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<Neighbor>, IndexError> {
        if query.dim() != self.dim && !self.is_empty() {
            return Err(IndexError::DimMismatch {
                index_dim: self.dim,
                query_dim: query.dim(),
            });
        }
        if k == 0 || self.is_empty() {
            return Ok(Vec::new());
        }
        let q = query.values();
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .map(|i| (1.0 - dot_f64(self.row(i), q), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            a.0.total_cmp(&b.0).then_with(|| self.ids[a.1].cmp(&self.ids[b.1]))
        };
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        Ok(scored
            .into_iter()
            .map(|(d, i)| Neighbor { item_id: self.ids[i].clone(), distance: d })
            .collect())
    }
}

/// One canopy: a center and every item within the loose radius of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Canopy {
    pub center_id: String,
    pub member_ids: Vec<String>,
}

/// Canopy clustering over arbitrary ids with a caller-supplied metric and an
/// explicit candidate order.
///
/// Repeatedly: take the first still-unconsumed id in `order` as a center;
/// its members are *all* ids (consumed or not) within `loose` of it; every
/// id within `tight` of the center is consumed. `tight <= loose` must hold
/// so each center is its own member and gets consumed.
pub fn canopy_cluster_by<F>(
    ids: &[String],
    order: &[usize],
    tight: f64,
    loose: f64,
    mut dist: F,
) -> Vec<Canopy>
where
    F: FnMut(usize, usize) -> f64,
{
    assert!(tight <= loose, "tight radius {tight} exceeds loose radius {loose}");
    let mut consumed = vec![false; ids.len()];
    let mut canopies = Vec::new();
    for &center in order {
        if consumed[center] {
            continue;
        }
        let mut member_ids = Vec::new();
        for (j, id) in ids.iter().enumerate() {
            let d = dist(center, j);
            if d <= loose {
                member_ids.push(id.clone());
            }
            if d <= tight {
                consumed[j] = true;
            }
        }
        member_ids.sort();
        canopies.push(Canopy { center_id: ids[center].clone(), member_ids });
    }
    canopies
}

/// Canopy clustering over embeddings with a seed-shuffled candidate order.
///
/// Tight/loose thresholds are cosine distances (defaults elsewhere: 0.15 and
/// 0.2). Member lists are sorted by id; canopies appear in discovery order.
pub fn canopy_cluster(
    items: &[IndexedItem],
    tight: f64,
    loose: f64,
    seed: u64,
) -> Result<Vec<Canopy>, IndexError> {
    if let Some(first) = items.first() {
        let dim = first.vector.dim();
        if let Some(bad) = items.iter().find(|i| i.vector.dim() != dim) {
            return Err(IndexError::DimMismatch {
                index_dim: dim,
                query_dim: bad.vector.dim(),
            });
        }
    }
    let mut seen = std::collections::HashSet::new();
    for item in items {
        if !seen.insert(item.item_id.as_str()) {
            return Err(IndexError::DuplicateId(item.item_id.clone()));
        }
    }
    let ids: Vec<String> = items.iter().map(|i| i.item_id.clone()).collect();
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    Ok(canopy_cluster_by(&ids, &order, tight, loose, |a, b| {
        1.0 - dot_f64(items[a].vector.values(), items[b].vector.values())
    }))
}
