//! Text embedding providers.
//!
//! [`HashProvider`] is a model-free stand-in: each text maps to a unit
//! vector drawn from a generator seeded by the SHA-256 of the text, so equal
//! texts embed identically and the whole pipeline runs without inference.
//! [`FileProvider`] serves rows from a pre-exported `.emb` file keyed by id.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{load_matrix, EmbeddingMatrix, FormatError};
use crate::extract::ContextUnit;

pub const DEFAULT_BATCH_SIZE: usize = 64;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("no vector for id {0:?}")]
    MissingId(String),
    #[error("provider returned {got} rows for {expected} inputs")]
    RowCount { expected: usize, got: usize },
    #[error("provider returned dim {got}, declared {declared}")]
    Dim { declared: usize, got: usize },
    #[error("batch {start}..{end} failed: {source}")]
    Batch {
        start: usize,
        end: usize,
        #[source]
        source: Box<ProviderError>,
    },
    #[error("could not load vectors: {0}")]
    Load(#[from] FormatError),
    #[error("bad provider spec {0:?} (expected `test`, `test:<dim>` or `file:<path>`)")]
    BadSpec(String),
    #[error("batch size must be positive")]
    ZeroBatch,
}

/// One text to embed, with the id file-backed providers key on.
#[derive(Debug, Clone, Copy)]
pub struct TextItem<'a> {
    pub id: &'a str,
    pub text: &'a str,
}

pub trait EmbeddingProvider {
    fn model_name(&self) -> &str;
    fn dim(&self) -> usize;
    /// One row per item, in input order.
    fn embed(&self, items: &[TextItem<'_>]) -> Result<Vec<Vec<f32>>, ProviderError>;
}

#[derive(Debug, Clone)]
pub struct HashProvider {
    dim: usize,
    name: String,
}

impl HashProvider {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        Self { dim, name: format!("test-hash-v1-d{dim}") }
    }

    pub fn embed_text(&self, text: &str) -> Vec<f32> {
        let seed: [u8; 32] = Sha256::digest(text.as_bytes()).into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let raw: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        raw.iter().map(|x| (x / norm) as f32).collect()
    }
}

impl Default for HashProvider {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM)
    }
}

impl EmbeddingProvider for HashProvider {
    fn model_name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, items: &[TextItem<'_>]) -> Result<Vec<Vec<f32>>, ProviderError> {
        Ok(items.iter().map(|it| self.embed_text(it.text)).collect())
    }
}

#[derive(Debug, Clone)]
pub struct FileProvider {
    path: PathBuf,
    name: String,
    vectors: EmbeddingMatrix,
}

impl FileProvider {
    pub fn open(path: &Path) -> Result<Self, ProviderError> {
        let vectors = load_matrix(path)?;
        Ok(Self { path: path.to_path_buf(), name: format!("file:{}", path.display()), vectors })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl EmbeddingProvider for FileProvider {
    fn model_name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.vectors.dim()
    }

    fn embed(&self, items: &[TextItem<'_>]) -> Result<Vec<Vec<f32>>, ProviderError> {
        items
            .iter()
            .map(|it| {
                self.vectors.get(it.id).map(<[f32]>::to_vec).ok_or_else(|| ProviderError::MissingId(it.id.to_string()))
            })
            .collect()
    }
}

/// Parsed `--provider` argument.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderSpec {
    Test { dim: usize },
    File(PathBuf),
}

impl ProviderSpec {
    pub fn open(&self) -> Result<Box<dyn EmbeddingProvider + Send + Sync>, ProviderError> {
        Ok(match self {
            ProviderSpec::Test { dim } => Box::new(HashProvider::new(*dim)),
            ProviderSpec::File(p) => Box::new(FileProvider::open(p)?),
        })
    }
}

impl FromStr for ProviderSpec {
    type Err = ProviderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ProviderError::BadSpec(s.to_string());
        if s == "test" {
            return Ok(ProviderSpec::Test { dim: HashProvider::DEFAULT_DIM });
        }
        if let Some(d) = s.strip_prefix("test:") {
            let dim: usize = d.parse().map_err(|_| bad())?;
            return if dim == 0 { Err(bad()) } else { Ok(ProviderSpec::Test { dim }) };
        }
        match s.strip_prefix("file:") {
            Some(p) if !p.is_empty() => Ok(ProviderSpec::File(PathBuf::from(p))),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for ProviderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProviderSpec::Test { dim } if *dim == HashProvider::DEFAULT_DIM => write!(f, "test"),
            ProviderSpec::Test { dim } => write!(f, "test:{dim}"),
            ProviderSpec::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

/// Embeds each context's `window_text` under the id `<work_id>#<index>`.
pub fn embed_contexts(
    provider: &dyn EmbeddingProvider,
    contexts: &[ContextUnit],
    batch_size: usize,
) -> Result<EmbeddingMatrix, ProviderError> {
    if batch_size == 0 {
        return Err(ProviderError::ZeroBatch);
    }
    let dim = provider.dim();
    let ids: Vec<String> = contexts.iter().map(ContextUnit::id).collect();
    let mut data = Vec::with_capacity(contexts.len() * dim);
    for (b, chunk) in contexts.chunks(batch_size).enumerate() {
        let start = b * batch_size;
        let end = start + chunk.len();
        let wrap = |e: ProviderError| ProviderError::Batch { start, end, source: Box::new(e) };
        let items: Vec<TextItem<'_>> =
            chunk.iter().zip(&ids[start..end]).map(|(c, id)| TextItem { id, text: &c.window_text }).collect();
        let rows = provider.embed(&items).map_err(wrap)?;
        if rows.len() != chunk.len() {
            return Err(wrap(ProviderError::RowCount { expected: chunk.len(), got: rows.len() }));
        }
        for row in rows {
            if row.len() != dim {
                return Err(wrap(ProviderError::Dim { declared: dim, got: row.len() }));
            }
            data.extend_from_slice(&row);
        }
    }
    Ok(EmbeddingMatrix::new(ids, dim, data).expect("context ids are unique per work and index"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::write_matrix;

    fn unit(work: &str, index: usize, text: &str) -> ContextUnit {
        ContextUnit {
            work_id: work.into(),
            index,
            sentence: text.into(),
            window_text: text.into(),
            token_count: text.split_whitespace().count(),
            artists: Vec::new(),
        }
    }

    #[test]
    fn hash_provider_is_deterministic_and_unit_norm() {
        let p = HashProvider::new(16);
        let a = p.embed_text("The Night Watch");
        assert_eq!(a, HashProvider::new(16).embed_text("The Night Watch"));
        assert_ne!(a, p.embed_text("The Night Watch."));
        let n: f64 = a.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn three_contexts_reproducible() {
        let cs = vec![unit("W1", 0, "a b c d"), unit("W1", 2, "e f g h"), unit("W2", 0, "i j k l")];
        let p = HashProvider::new(8);
        let m1 = embed_contexts(&p, &cs, 64).unwrap();
        let m2 = embed_contexts(&p, &cs, 64).unwrap();
        assert_eq!(m1.rows(), 3);
        assert_eq!(m1.dim(), 8);
        assert_eq!(m1.ids(), &["W1#0".to_string(), "W1#2".into(), "W2#0".into()]);
        assert_eq!(m1, m2);
    }

    #[test]
    fn empty_contexts_give_empty_matrix() {
        let m = embed_contexts(&HashProvider::new(4), &[], 64).unwrap();
        assert_eq!((m.rows(), m.dim()), (0, 4));
    }

    #[test]
    fn batching_does_not_change_bytes() {
        let cs: Vec<ContextUnit> = (0..130).map(|i| unit("W", i, &format!("sentence number {i} here"))).collect();
        let p = HashProvider::new(12);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        write_matrix(&embed_contexts(&p, &cs, 64).unwrap(), &mut a).unwrap();
        write_matrix(&embed_contexts(&p, &cs, 130).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn file_provider_missing_id_names_batch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.emb");
        let m = EmbeddingMatrix::from_rows(2, [("W#0", [1.0f32, 0.0]), ("W#1", [0.0, 1.0])]).unwrap();
        crate::embedding::save_matrix(&m, &path).unwrap();
        let p = FileProvider::open(&path).unwrap();
        let cs = vec![unit("W", 0, "x"), unit("W", 1, "y"), unit("W", 2, "z")];
        let err = embed_contexts(&p, &cs, 2).unwrap_err();
        match err {
            ProviderError::Batch { start, end, source } => {
                assert_eq!((start, end), (2, 3));
                assert!(matches!(*source, ProviderError::MissingId(ref id) if id == "W#2"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let ok = embed_contexts(&p, &cs[..2], 2).unwrap();
        assert_eq!(ok.data(), m.data());
    }

    #[test]
    fn provider_spec_parsing() {
        assert_eq!("test".parse::<ProviderSpec>().unwrap(), ProviderSpec::Test { dim: 64 });
        assert_eq!("test:8".parse::<ProviderSpec>().unwrap(), ProviderSpec::Test { dim: 8 });
        assert_eq!("file:a.emb".parse::<ProviderSpec>().unwrap(), ProviderSpec::File("a.emb".into()));
        assert!("sbert".parse::<ProviderSpec>().is_err());
        assert!("test:0".parse::<ProviderSpec>().is_err());
        assert_eq!(ProviderSpec::Test { dim: 8 }.to_string(), "test:8");
    }
}
