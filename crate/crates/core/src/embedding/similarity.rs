use thiserror::Error;

use super::EmbeddingMatrix;

/// Norms below this are treated as degenerate embeddings.
pub const ZERO_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimilarityError {
    #[error("vector lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty vectors")]
    Empty,
    #[error("zero vector (norm below {ZERO_NORM_EPS:e})")]
    ZeroVector,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error("no candidate rows")]
    EmptyCandidates,
    #[error("every candidate row is a zero vector")]
    AllDegenerate,
    #[error("query has dim {query}, candidates have dim {rows}")]
    DimMismatch { query: usize, rows: usize },
    #[error("query vector is degenerate")]
    DegenerateQuery,
    #[error("k = {k} exceeds {rows} candidate rows")]
    KTooLarge { k: usize, rows: usize },
}

/// Cosine similarity accumulated in `f64`, clamped to `[-1, 1]`.
pub fn cosine<T: Copy + Into<f64>>(u: &[T], v: &[T]) -> Result<f64, SimilarityError> {
    if u.len() != v.len() {
        return Err(SimilarityError::LengthMismatch(u.len(), v.len()));
    }
    if u.is_empty() {
        return Err(SimilarityError::Empty);
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b): (f64, f64) = (a.into(), b.into());
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    let (nu, nv) = (nu.sqrt(), nv.sqrt());
    if nu < ZERO_NORM_EPS || nv < ZERO_NORM_EPS {
        return Err(SimilarityError::ZeroVector);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

fn scores(query: &[f32], m: &EmbeddingMatrix) -> Result<Vec<Option<f64>>, SearchError> {
    if m.is_empty() {
        return Err(SearchError::EmptyCandidates);
    }
    if query.len() != m.dim() {
        return Err(SearchError::DimMismatch { query: query.len(), rows: m.dim() });
    }
    if query.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt() < ZERO_NORM_EPS {
        return Err(SearchError::DegenerateQuery);
    }
    Ok((0..m.rows()).map(|i| cosine(query, m.row(i)).ok()).collect())
}

/// Row with the highest cosine score. Ties go to the lowest index; zero rows
/// are skipped.
pub fn argmax_similarity(query: &[f32], m: &EmbeddingMatrix) -> Result<(usize, f64), SearchError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores(query, m)?.into_iter().enumerate() {
        let Some(s) = s else { continue };
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.ok_or(SearchError::AllDegenerate)
}

/// The `k` best rows as `(row index, score)`, score descending, ties by
/// lowest index. Degenerate rows are dropped, so fewer than `k` entries may
/// come back.
pub fn top_k(query: &[f32], m: &EmbeddingMatrix, k: usize) -> Result<Vec<(usize, f64)>, SearchError> {
    if k > m.rows() {
        return Err(SearchError::KTooLarge { k, rows: m.rows() });
    }
    let mut ranked: Vec<(usize, f64)> =
        scores(query, m)?.into_iter().enumerate().filter_map(|(i, s)| s.map(|s| (i, s))).collect();
    if ranked.is_empty() {
        return Err(SearchError::AllDegenerate);
    }
    // Stable sort keeps index order among equal scores.
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    ranked.truncate(k);
    Ok(ranked)
}
