//! Retrieval evaluation: ranking, per-query precision-recall points, the
//! upper envelope on a shared 101-point recall grid, macro averaging and
//! plot data.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine, top_k, EmbeddingMatrix, SearchError};
use crate::io_util::atomic_write;

pub const GRID_POINTS: usize = 101;

/// `{0, 0.01, ..., 1}`.
pub fn recall_grid() -> Vec<f64> {
    (0..GRID_POINTS).map(|i| i as f64 / 100.0).collect()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("query has no positive labels")]
    NoPositives,
    #[error("scores ({scores}), labels ({labels}) and candidates ({candidates}) differ in length")]
    LengthMismatch { scores: usize, labels: usize, candidates: usize },
    #[error("label {0} is not 0 or 1")]
    BadLabel(u8),
    #[error("score is not finite")]
    NonFiniteScore,
    #[error("no curves to average")]
    EmptyInput,
    #[error("curve is not on the shared recall grid")]
    GridMismatch,
    #[error("no points")]
    NoPoints,
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error("no scores for query {0:?}")]
    MissingScores(String),
}

/// One painting's candidate sentences with relevance labels and, once
/// scored, model similarities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalQuery {
    pub qid: String,
    pub candidate_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

impl EvalQuery {
    /// Checks labels and, when present, scores.
    pub fn validate(&self) -> Result<(), EvalError> {
        let n = self.candidate_ids.len();
        if self.labels.len() != n || (!self.scores.is_empty() && self.scores.len() != n) {
            return Err(EvalError::LengthMismatch {
                scores: self.scores.len(),
                labels: self.labels.len(),
                candidates: n,
            });
        }
        check_labels(&self.labels)?;
        if self.scores.iter().any(|s| !s.is_finite()) {
            return Err(EvalError::NonFiniteScore);
        }
        Ok(())
    }
}

fn check_labels(labels: &[u8]) -> Result<usize, EvalError> {
    if let Some(&b) = labels.iter().find(|&&l| l > 1) {
        return Err(EvalError::BadLabel(b));
    }
    match labels.iter().filter(|&&l| l == 1).count() {
        0 => Err(EvalError::NoPositives),
        p => Ok(p),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub recall_grid: Vec<f64>,
    pub precision: Vec<f64>,
}

impl PrCurve {
    pub fn constant(p: f64) -> Self {
        Self { recall_grid: recall_grid(), precision: vec![p; GRID_POINTS] }
    }

    fn on_grid(&self) -> bool {
        self.precision.len() == GRID_POINTS && self.recall_grid == recall_grid()
    }
}

/// The `k` best candidates by cosine score, descending; ties keep input order.
pub fn rank_candidates(query: &[f32], candidates: &EmbeddingMatrix, k: usize) -> Result<Vec<(String, f64)>, EvalError> {
    Ok(top_k(query, candidates, k)?.into_iter().map(|(i, s)| (candidates.ids()[i].clone(), s)).collect())
}

/// Indices sorted by score descending, stable on ties.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

fn check_scored(scores: &[f64], labels: &[u8]) -> Result<usize, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch { scores: scores.len(), labels: labels.len(), candidates: labels.len() });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore);
    }
    check_labels(labels)
}

/// `(recall, precision)` after each rank of the score-sorted list.
pub fn pr_points(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>, EvalError> {
    let positives = check_scored(scores, labels)? as f64;
    let mut tp = 0usize;
    Ok(ranking(scores)
        .into_iter()
        .enumerate()
        .map(|(k, i)| {
            tp += usize::from(labels[i]);
            (tp as f64 / positives, tp as f64 / (k + 1) as f64)
        })
        .collect())
}

/// `P(r) = max { p : (recall, p) in points, recall >= r }` on the grid.
pub fn envelope_on_grid(points: &[(f64, f64)]) -> Result<PrCurve, EvalError> {
    if points.is_empty() {
        return Err(EvalError::NoPoints);
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // suffix maxima over recall-sorted points
    let mut suffix = vec![0.0; sorted.len()];
    let mut best = f64::NEG_INFINITY;
    for i in (0..sorted.len()).rev() {
        best = best.max(sorted[i].1);
        suffix[i] = best;
    }
    let grid = recall_grid();
    let mut precision = Vec::with_capacity(GRID_POINTS);
    let mut j = 0;
    for &r in &grid {
        while j < sorted.len() && sorted[j].0 < r {
            j += 1;
        }
        precision.push(if j < sorted.len() { suffix[j] } else { 0.0 });
    }
    Ok(PrCurve { recall_grid: grid, precision })
}

/// Pointwise mean of curves on the shared grid.
pub fn macro_average(curves: &[PrCurve]) -> Result<PrCurve, EvalError> {
    if curves.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if curves.iter().any(|c| !c.on_grid()) {
        return Err(EvalError::GridMismatch);
    }
    let n = curves.len() as f64;
    let precision = (0..GRID_POINTS).map(|i| curves.iter().map(|c| c.precision[i]).sum::<f64>() / n).collect();
    Ok(PrCurve { recall_grid: recall_grid(), precision })
}

/// Mean of precision@k over the ranks `k` holding a positive.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    let positives = check_scored(scores, labels)?;
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (k, i) in ranking(scores).into_iter().enumerate() {
        if labels[i] == 1 {
            tp += 1;
            sum += tp as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Envelope curve for one scored query.
pub fn query_curve(scores: &[f64], labels: &[u8]) -> Result<PrCurve, EvalError> {
    envelope_on_grid(&pr_points(scores, labels)?)
}

pub fn plot_csv(baseline: &PrCurve, adapted: &PrCurve) -> Result<String, EvalError> {
    if !baseline.on_grid() || !adapted.on_grid() {
        return Err(EvalError::GridMismatch);
    }
    let mut out = String::from("recall,precision_baseline,precision_adapted\n");
    for i in 0..GRID_POINTS {
        writeln!(out, "{:.6},{:.6},{:.6}", baseline.recall_grid[i], baseline.precision[i], adapted.precision[i])
            .expect("writing to a String");
    }
    Ok(out)
}

/// Writes the baseline/adapted comparison CSV (header plus 101 rows).
pub fn emit_plot_data(baseline: &PrCurve, adapted: &PrCurve, path: &Path) -> Result<(), EmitError> {
    let csv = plot_csv(baseline, adapted)?;
    atomic_write(path, csv.as_bytes())?;
    Ok(())
}

#[derive(Debug, Error)]
pub enum EmitError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Cosine score of each query's row in `queries_emb` against each of its
/// candidates' rows in `candidates_emb`. One output row per query (keyed by
/// qid), one column per candidate, so every query needs the same candidate
/// count.
pub fn score_matrix(
    queries: &[EvalQuery],
    queries_emb: &EmbeddingMatrix,
    candidates_emb: &EmbeddingMatrix,
) -> Result<EmbeddingMatrix, ScoreError> {
    let width = queries.first().map(|q| q.candidate_ids.len()).unwrap_or(0);
    if width == 0 {
        return Err(ScoreError::NoCandidates);
    }
    let mut rows = Vec::with_capacity(queries.len());
    for q in queries {
        if q.candidate_ids.len() != width {
            return Err(ScoreError::RaggedCandidates {
                qid: q.qid.clone(),
                expected: width,
                got: q.candidate_ids.len(),
            });
        }
        let qv = queries_emb.get(&q.qid).ok_or_else(|| ScoreError::MissingVector(q.qid.clone()))?;
        let mut row = Vec::with_capacity(width);
        for c in &q.candidate_ids {
            let cv = candidates_emb.get(c).ok_or_else(|| ScoreError::MissingVector(c.clone()))?;
            row.push(cosine(qv, cv).map_err(|e| ScoreError::Degenerate(format!("{} / {c}: {e}", q.qid)))? as f32);
        }
        rows.push((q.qid.clone(), row));
    }
    EmbeddingMatrix::from_rows(width, rows).map_err(|e| ScoreError::Matrix(e.to_string()))
}

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("no candidates")]
    NoCandidates,
    #[error("query {qid} has {got} candidates, expected {expected}")]
    RaggedCandidates { qid: String, expected: usize, got: usize },
    #[error("no vector for {0:?}")]
    MissingVector(String),
    #[error("degenerate vector: {0}")]
    Degenerate(String),
    #[error("{0}")]
    Matrix(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryReport {
    pub qid: String,
    pub positives: usize,
    pub ap_baseline: f64,
    pub ap_adapted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub baseline: PrCurve,
    pub adapted: PrCurve,
    pub map_baseline: f64,
    pub map_adapted: f64,
    pub queries: Vec<QueryReport>,
}

fn scores_for(m: &EmbeddingMatrix, q: &EvalQuery) -> Result<Vec<f64>, EvalError> {
    let row = m.get(&q.qid).ok_or_else(|| EvalError::MissingScores(q.qid.clone()))?;
    if row.len() != q.candidate_ids.len() {
        return Err(EvalError::LengthMismatch {
            scores: row.len(),
            labels: q.labels.len(),
            candidates: q.candidate_ids.len(),
        });
    }
    Ok(row.iter().map(|&v| f64::from(v)).collect())
}

/// Per-query curves and AP under both score sets, macro-averaged.
pub fn evaluate(
    queries: &[EvalQuery],
    baseline: &EmbeddingMatrix,
    adapted: &EmbeddingMatrix,
) -> Result<EvalReport, EvalError> {
    let mut base_curves = Vec::with_capacity(queries.len());
    let mut ad_curves = Vec::with_capacity(queries.len());
    let mut reports = Vec::with_capacity(queries.len());
    for q in queries {
        q.validate()?;
        let sb = scores_for(baseline, q)?;
        let sa = scores_for(adapted, q)?;
        base_curves.push(query_curve(&sb, &q.labels)?);
        ad_curves.push(query_curve(&sa, &q.labels)?);
        reports.push(QueryReport {
            qid: q.qid.clone(),
            positives: q.labels.iter().filter(|&&l| l == 1).count(),
            ap_baseline: average_precision(&sb, &q.labels)?,
            ap_adapted: average_precision(&sa, &q.labels)?,
        });
    }
    let n = reports.len().max(1) as f64;
    Ok(EvalReport {
        baseline: macro_average(&base_curves)?,
        adapted: macro_average(&ad_curves)?,
        map_baseline: reports.iter().map(|r| r.ap_baseline).sum::<f64>() / n,
        map_adapted: reports.iter().map(|r| r.ap_adapted).sum::<f64>() / n,
        queries: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn grid_is_101_points() {
        let g = recall_grid();
        assert_eq!(g.len(), 101);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[50], 0.5);
        assert_eq!(g[100], 1.0);
    }

    #[test]
    fn pr_points_hand_walk() {
        let p = pr_points(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap();
        assert_eq!(p.len(), 3);
        assert!(close(p[0].0, 0.5) && close(p[0].1, 1.0));
        assert!(close(p[1].0, 1.0) && close(p[1].1, 1.0));
        assert!(close(p[2].0, 1.0) && close(p[2].1, 2.0 / 3.0));
    }

    #[test]
    fn perfect_ranking_points_and_curve() {
        let p = pr_points(&[0.9, 0.7, 0.5, 0.1], &[1, 1, 0, 0]).unwrap();
        assert!(p.iter().filter(|(r, _)| *r < 1.0 || close(*r, 1.0)).take(2).all(|&(_, pr)| pr == 1.0));
        let c = query_curve(&[0.9, 0.7, 0.5, 0.1], &[1, 1, 0, 0]).unwrap();
        assert!(c.precision.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn single_positive_last() {
        let p = pr_points(&[0.4, 0.3, 0.2, 0.1], &[0, 0, 0, 1]).unwrap();
        assert_eq!(*p.last().unwrap(), (1.0, 0.25));
    }

    #[test]
    fn ties_keep_input_order() {
        // both score 0.5: positive listed second stays second
        let p = pr_points(&[0.5, 0.5], &[0, 1]).unwrap();
        assert_eq!(p, vec![(0.0, 0.0), (1.0, 0.5)]);
    }

    #[test]
    fn envelope_hand_example() {
        let c = envelope_on_grid(&[(0.5, 1.0), (1.0, 0.667)]).unwrap();
        for (r, p) in c.recall_grid.iter().zip(&c.precision) {
            let expect = if *r <= 0.5 { 1.0 } else { 0.667 };
            assert_eq!(*p, expect, "r = {r}");
        }
    }

    #[test]
    fn no_positives_rejected() {
        assert_eq!(pr_points(&[0.1, 0.2], &[0, 0]), Err(EvalError::NoPositives));
        assert_eq!(average_precision(&[0.1], &[0]), Err(EvalError::NoPositives));
        assert_eq!(pr_points(&[0.1], &[2]), Err(EvalError::BadLabel(2)));
        assert_eq!(envelope_on_grid(&[]), Err(EvalError::NoPoints));
    }

    #[test]
    fn macro_average_examples() {
        let ones = PrCurve::constant(1.0);
        let zeros = PrCurve::constant(0.0);
        assert_eq!(macro_average(&[ones.clone(), ones.clone()]).unwrap(), ones);
        assert_eq!(macro_average(&[ones, zeros]).unwrap(), PrCurve::constant(0.5));
        assert_eq!(macro_average(&[]), Err(EvalError::EmptyInput));
        let bad = PrCurve { recall_grid: vec![0.0], precision: vec![1.0] };
        assert_eq!(macro_average(&[bad]), Err(EvalError::GridMismatch));
    }

    #[test]
    fn average_precision_examples() {
        assert_eq!(average_precision(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.9, 0.1], &[0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn average_precision_matches_prefix_definition() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let scores: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut labels: Vec<u8> = (0..8).map(|_| rng.random_range(0..2)).collect();
            labels[rng.random_range(0..8)] = 1;
            // oracle: for each positive, precision of the prefix ending at it,
            // where the prefix is every candidate ranked at or above it
            let pos: Vec<usize> = (0..8).filter(|&i| labels[i] == 1).collect();
            let rank_of =
                |i: usize| (0..8).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j <= i)).count();
            let oracle = pos
                .iter()
                .map(|&i| {
                    let k = rank_of(i);
                    let tp = pos.iter().filter(|&&j| rank_of(j) <= k).count();
                    tp as f64 / k as f64
                })
                .sum::<f64>()
                / pos.len() as f64;
            assert!((average_precision(&scores, &labels).unwrap() - oracle).abs() < 1e-12);
            // AP from the PR points: mean precision at the points where recall rises
            let pts = pr_points(&scores, &labels).unwrap();
            let mut prev = 0.0;
            let mut acc = 0.0;
            for (r, p) in pts {
                if r > prev {
                    acc += p;
                    prev = r;
                }
            }
            assert!((acc / pos.len() as f64 - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_shape() {
        let csv = plot_csv(&PrCurve::constant(0.25), &PrCurve::constant(0.75)).unwrap();
        let lines: Vec<&str> = csv.split('\n').collect();
        assert_eq!(lines[0], "recall,precision_baseline,precision_adapted");
        assert_eq!(lines.len(), 103); // header + 101 + trailing empty
        assert_eq!(lines[1], "0.000000,0.250000,0.750000");
        assert_eq!(lines[101], "1.000000,0.250000,0.750000");
        assert!(!csv.contains('\r'));
    }

    #[test]
    fn scoring_and_report() {
        let q = |qid: &str, labels: Vec<u8>| EvalQuery {
            qid: qid.into(),
            candidate_ids: vec!["c0".into(), "c1".into(), "c2".into()],
            scores: vec![],
            labels,
            provenance: None,
        };
        let queries = vec![q("p1", vec![1, 0, 0]), q("p2", vec![0, 0, 1])];
        let img = EmbeddingMatrix::from_rows(2, [("p1", [1.0f32, 0.0]), ("p2", [0.0, 1.0])]).unwrap();
        let ctx =
            EmbeddingMatrix::from_rows(2, [("c0", [1.0f32, 0.1]), ("c1", [0.5, 0.5]), ("c2", [0.1, 1.0])]).unwrap();
        let s = score_matrix(&queries, &img, &ctx).unwrap();
        assert_eq!((s.rows(), s.dim()), (2, 3));
        let r = evaluate(&queries, &s, &s).unwrap();
        assert_eq!(r.map_baseline, 1.0);
        assert_eq!(r.baseline, PrCurve::constant(1.0));
        // reversed scores put the positive last of three
        let rev = EmbeddingMatrix::from_rows(3, [("p1", [0.0f32, 0.5, 1.0]), ("p2", [1.0, 0.5, 0.0])]).unwrap();
        let r = evaluate(&queries, &s, &rev).unwrap();
        assert!((r.map_adapted - 1.0 / 3.0).abs() < 1e-12);
        assert!(matches!(
            score_matrix(&queries, &img, &EmbeddingMatrix::empty(2).unwrap()),
            Err(ScoreError::MissingVector(_))
        ));
    }

    proptest! {
        #[test]
        fn envelope_is_monotone_and_bounded(
            scores in proptest::collection::vec(0.0f64..1.0, 1..15),
            seed_labels in proptest::collection::vec(0u8..2, 15),
        ) {
            let mut labels: Vec<u8> = seed_labels[..scores.len()].to_vec();
            labels[0] = 1;
            let c = query_curve(&scores, &labels).unwrap();
            prop_assert!(c.precision.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(c.precision.iter().all(|p| (0.0..=1.0).contains(p)));
        }

        #[test]
        fn macro_average_permutation_invariant(ps in proptest::collection::vec(0.0f64..1.0, 2..6)) {
            let curves: Vec<PrCurve> = ps.iter().map(|&p| PrCurve::constant(p)).collect();
            let mut rev = curves.clone();
            rev.reverse();
            let a = macro_average(&curves).unwrap();
            let b = macro_average(&rev).unwrap();
            for (x, y) in a.precision.iter().zip(&b.precision) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
