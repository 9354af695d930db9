//! Shared embedding space: unit-norm vectors, batches of them, and the
//! cosine similarity matrix between two batches.
//!
//! All arithmetic is `f64`. Rows of an [`EmbeddingBatch`] are checked for
//! unit norm on construction, so a batch that exists is always valid.

use std::collections::HashSet;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use thiserror::Error;

/// Default dimensionality of the shared space.
pub const DEFAULT_EMBED_DIM: usize = 512;

/// Tolerance on `|norm - 1|` for anything claiming to be an embedding.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Below this Euclidean norm a vector is treated as zero.
pub const ZERO_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("cannot normalize a zero vector (norm {norm:e})")]
    ZeroVector { norm: f64 },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("embedding dimension must be positive")]
    EmptyVector,
    #[error("row {row} is not unit norm (norm {norm})")]
    NotUnitNorm { row: usize, norm: f64 },
    #[error("duplicate sample id {0:?} in batch")]
    DuplicateId(String),
    #[error("batch has {rows} rows but {ids} ids")]
    IdCountMismatch { rows: usize, ids: usize },
}

/// A unit-norm vector in the shared space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// Wraps values that are already unit norm, verifying the invariant.
    pub fn from_unit(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        check_finite(&values)?;
        if values.is_empty() {
            return Err(EmbeddingError::EmptyVector);
        }
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(EmbeddingError::NotUnitNorm { row: 0, norm });
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn dot(&self, other: &EmbeddingVector) -> Result<f64, EmbeddingError> {
        if self.dim() != other.dim() {
            return Err(EmbeddingError::DimMismatch {
                left: self.dim(),
                right: other.dim(),
            });
        }
        Ok(dot(&self.values, &other.values))
    }
}

fn check_finite(v: &[f64]) -> Result<(), EmbeddingError> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(EmbeddingError::NonFinite { index }),
        None => Ok(()),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `v` to unit Euclidean norm.
///
/// A zero (or numerically zero) input is an error: it always means an
/// upstream encoder produced a degenerate output.
pub fn l2_normalize(v: &[f64]) -> Result<EmbeddingVector, EmbeddingError> {
    if v.is_empty() {
        return Err(EmbeddingError::EmptyVector);
    }
    check_finite(v)?;
    let norm = l2_norm(v);
    if norm < ZERO_NORM_EPS {
        return Err(EmbeddingError::ZeroVector { norm });
    }
    Ok(EmbeddingVector {
        values: v.iter().map(|x| x / norm).collect(),
    })
}

/// `N` embeddings of equal dimension, stored as an `N x d` matrix, with one
/// unique sample id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    ids: Vec<String>,
    rows: Array2<f64>,
}

impl EmbeddingBatch {
    /// Builds a batch from a matrix whose rows must already be unit norm.
    pub fn new(ids: Vec<String>, rows: Array2<f64>) -> Result<Self, EmbeddingError> {
        if ids.len() != rows.nrows() {
            return Err(EmbeddingError::IdCountMismatch {
                rows: rows.nrows(),
                ids: ids.len(),
            });
        }
        if rows.ncols() == 0 {
            return Err(EmbeddingError::EmptyVector);
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(EmbeddingError::DuplicateId(id.clone()));
            }
        }
        for (i, row) in rows.axis_iter(Axis(0)).enumerate() {
            if let Some(j) = row.iter().position(|x| !x.is_finite()) {
                return Err(EmbeddingError::NonFinite {
                    index: i * rows.ncols() + j,
                });
            }
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(EmbeddingError::NotUnitNorm { row: i, norm });
            }
        }
        Ok(Self { ids, rows })
    }

    /// Normalizes each row of `raw` and builds the batch.
    pub fn from_raw(ids: Vec<String>, raw: ArrayView2<'_, f64>) -> Result<Self, EmbeddingError> {
        let mut rows = Array2::zeros(raw.raw_dim());
        for (mut dst, src) in rows.axis_iter_mut(Axis(0)).zip(raw.axis_iter(Axis(0))) {
            let src: Vec<f64> = src.to_vec();
            let unit = l2_normalize(&src)?;
            dst.assign(&ArrayView1::from(unit.values()));
        }
        Self::new(ids, rows)
    }

    pub fn from_vectors(ids: Vec<String>, vectors: &[EmbeddingVector]) -> Result<Self, EmbeddingError> {
        let dim = vectors.first().map(|v| v.dim()).unwrap_or(0);
        let mut rows = Array2::zeros((vectors.len(), dim));
        for (i, v) in vectors.iter().enumerate() {
            if v.dim() != dim {
                return Err(EmbeddingError::DimMismatch {
                    left: dim,
                    right: v.dim(),
                });
            }
            rows.row_mut(i).assign(&ArrayView1::from(v.values()));
        }
        Self::new(ids, rows)
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn row(&self, i: usize) -> EmbeddingVector {
        EmbeddingVector {
            values: self.rows.row(i).to_vec(),
        }
    }

    /// Reorders rows (and ids) so that new row `k` is old row `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let ids = perm.iter().map(|&i| self.ids[i].clone()).collect();
        let rows = self.rows.select(Axis(0), perm);
        Self { ids, rows }
    }
}

/// Dense `N x M` similarity matrix with row and column ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub entries: Array2<f64>,
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
}

impl SimilarityMatrix {
    /// Wraps a raw score matrix; ids default to the row/column indices.
    pub fn from_entries(entries: Array2<f64>) -> Self {
        let row_ids = (0..entries.nrows()).map(|i| i.to_string()).collect();
        let col_ids = (0..entries.ncols()).map(|i| i.to_string()).collect();
        Self {
            entries,
            row_ids,
            col_ids,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.entries.dim()
    }

    pub fn transposed(&self) -> Self {
        Self {
            entries: self.entries.t().to_owned(),
            row_ids: self.col_ids.clone(),
            col_ids: self.row_ids.clone(),
        }
    }
}

/// `entries[i][j] = a.rows[i] . b.rows[j]`. Since both batches are unit
/// norm this is their cosine similarity.
pub fn cosine_similarity_matrix(
    a: &EmbeddingBatch,
    b: &EmbeddingBatch,
) -> Result<SimilarityMatrix, EmbeddingError> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(SimilarityMatrix {
        entries: a.rows.dot(&b.rows.t()),
        row_ids: a.ids.clone(),
        col_ids: b.ids.clone(),
    })
}
