//! Dense embedding matrices, the `.emb` vector file format, cosine
//! similarity and exact similarity search.
//!
//! Every vector that crosses a stage boundary (sentence embeddings,
//! pre-projection CLIP features, frozen projection weights, score rows) is
//! stored as an [`EmbeddingMatrix`]: string row ids plus a row-major `f32`
//! payload.

mod format;
mod provider;
mod similarity;

pub use format::{load_matrix, read_matrix, save_matrix, write_matrix, FormatError, FORMAT_VERSION, MAGIC};
pub use provider::{
    embed_contexts, EmbeddingProvider, FileProvider, HashProvider, ProviderError, ProviderSpec, TextItem,
    DEFAULT_BATCH_SIZE,
};
pub use similarity::{argmax_similarity, cosine, top_k, SearchError, SimilarityError, ZERO_NORM_EPS};

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MatrixError {
    #[error("dimension must be positive")]
    ZeroDim,
    #[error("payload has {got} values, expected {rows} x {dim}")]
    ShapeMismatch { rows: usize, dim: usize, got: usize },
    #[error("duplicate row id {0:?}")]
    DuplicateId(String),
    #[error("row has {got} values, matrix dim is {dim}")]
    RowDim { dim: usize, got: usize },
    #[error("unknown row id {0:?}")]
    UnknownId(String),
}

/// Row-major `f32` matrix with unique string row ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self, MatrixError> {
        if dim == 0 {
            return Err(MatrixError::ZeroDim);
        }
        if ids.len() * dim != data.len() {
            return Err(MatrixError::ShapeMismatch { rows: ids.len(), dim, got: data.len() });
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(MatrixError::DuplicateId(id.clone()));
            }
        }
        Ok(Self { ids, dim, data, index })
    }

    pub fn empty(dim: usize) -> Result<Self, MatrixError> {
        Self::new(Vec::new(), dim, Vec::new())
    }

    /// Builds a matrix from `(id, row)` pairs; every row must have length `dim`.
    pub fn from_rows<I, S, R>(dim: usize, rows: I) -> Result<Self, MatrixError>
    where
        I: IntoIterator<Item = (S, R)>,
        S: Into<String>,
        R: AsRef<[f32]>,
    {
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for (id, row) in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(MatrixError::RowDim { dim, got: row.len() });
            }
            ids.push(id.into());
            data.extend_from_slice(row);
        }
        Self::new(ids, dim, data)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.row(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids.iter().map(String::as_str).zip(self.data.chunks_exact(self.dim))
    }

    /// New matrix holding the given rows, in the given order.
    pub fn select<S: AsRef<str>>(&self, ids: &[S]) -> Result<Self, MatrixError> {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        let mut out_ids = Vec::with_capacity(ids.len());
        for id in ids {
            let id = id.as_ref();
            let row = self.get(id).ok_or_else(|| MatrixError::UnknownId(id.to_string()))?;
            data.extend_from_slice(row);
            out_ids.push(id.to_string());
        }
        Self::new(out_ids, self.dim, data)
    }

    /// Copies the payload into a `rows x dim` `f64` array.
    pub fn to_array_f64(&self) -> ndarray::Array2<f64> {
        ndarray::Array2::from_shape_fn((self.rows(), self.dim), |(i, j)| f64::from(self.data[i * self.dim + j]))
    }
}
