//! Metadata-guided alignment: render a query from painting metadata, pick
//! the most similar context among the creator's harvested contexts, and
//! build the training label.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::embedding::{argmax_similarity, EmbeddingMatrix, EmbeddingProvider, ProviderError, SearchError, TextItem};
use crate::extract::ContextUnit;

pub const LABEL_SEPARATOR: &str = " \u{2014} ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaintingRecord {
    pub qid: String,
    pub title: String,
    pub creator_name: String,
    #[serde(default)]
    pub creator_qid: String,
    #[serde(default)]
    pub year: Option<i32>,
    #[serde(default)]
    pub depicts: Vec<String>,
    #[serde(default)]
    pub movement: Option<String>,
    #[serde(default)]
    pub link_count: u64,
    #[serde(default)]
    pub image_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedPair {
    pub qid: String,
    pub context_id: String,
    /// The aligned context's `window_text`.
    pub sentence: String,
    pub similarity: f64,
    pub label_text: String,
    pub image_ref: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnmatchedReason {
    NoContexts,
    BelowMinSim,
    AllDegenerate,
    DegenerateQuery,
    DuplicateQid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unmatched {
    pub qid: String,
    pub reason: UnmatchedReason,
    pub creator_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
}

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("no contexts for creator {0:?}")]
    NoContexts(String),
    #[error("context {0} has no vector")]
    MissingVector(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error("painting record {qid}: {what} is empty")]
    InvalidRecord { qid: String, what: &'static str },
}

/// `[Title] is a [Year] painting by [Creator] depicting [Depicts]`, with the
/// year and depicting clause dropped when absent.
pub fn render_query(p: &PaintingRecord) -> String {
    let mut s = format!("{} is a ", p.title.trim());
    if let Some(y) = p.year {
        s.push_str(&format!("{y} "));
    }
    s.push_str("painting by ");
    s.push_str(p.creator_name.trim());
    let depicts: Vec<&str> = p.depicts.iter().map(|d| d.trim()).filter(|d| !d.is_empty()).collect();
    if !depicts.is_empty() {
        s.push_str(" depicting ");
        s.push_str(&depicts.join(", "));
    }
    s
}

pub fn build_label(p: &PaintingRecord, sentence: &str) -> String {
    let prefix = render_query(p);
    if sentence.is_empty() {
        prefix
    } else {
        format!("{prefix}{LABEL_SEPARATOR}{sentence}")
    }
}

/// Grouping key: NFC then lowercase.
pub fn normalize_name(name: &str) -> String {
    name.trim().nfc().collect::<String>().to_lowercase()
}

/// One creator's candidate contexts with their vectors, row-aligned.
#[derive(Debug, Clone)]
pub struct ArtistContexts<'a> {
    pub units: Vec<&'a ContextUnit>,
    pub vectors: EmbeddingMatrix,
}

/// All contexts keyed by the normalized names of the artists they were
/// harvested for.
#[derive(Debug)]
pub struct ContextIndex<'a> {
    units: &'a [ContextUnit],
    vectors: &'a EmbeddingMatrix,
    by_artist: HashMap<String, Vec<usize>>,
}

impl<'a> ContextIndex<'a> {
    pub fn new(units: &'a [ContextUnit], vectors: &'a EmbeddingMatrix) -> Result<Self, AlignError> {
        let mut by_artist: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, u) in units.iter().enumerate() {
            let id = u.id();
            if vectors.position(&id).is_none() {
                return Err(AlignError::MissingVector(id));
            }
            let mut seen = HashSet::new();
            for a in &u.artists {
                let key = normalize_name(a);
                if seen.insert(key.clone()) {
                    by_artist.entry(key).or_default().push(i);
                }
            }
        }
        Ok(Self { units, vectors, by_artist })
    }

    pub fn artist_count(&self) -> usize {
        self.by_artist.len()
    }

    pub fn for_artist(&self, name: &str) -> Option<ArtistContexts<'a>> {
        let rows = self.by_artist.get(&normalize_name(name))?;
        let units: Vec<&ContextUnit> = rows.iter().map(|&i| &self.units[i]).collect();
        let ids: Vec<String> = units.iter().map(|u| u.id()).collect();
        let vectors = self.vectors.select(&ids).expect("ids checked at construction");
        Some(ArtistContexts { units, vectors })
    }
}

fn check_record(p: &PaintingRecord) -> Result<(), AlignError> {
    let bad = |what| Err(AlignError::InvalidRecord { qid: p.qid.clone(), what });
    if p.qid.trim().is_empty() {
        return bad("qid");
    }
    if p.title.trim().is_empty() {
        return bad("title");
    }
    if p.creator_name.trim().is_empty() {
        return bad("creator_name");
    }
    Ok(())
}

fn embed_query(p: &PaintingRecord, provider: &dyn EmbeddingProvider) -> Result<Vec<f32>, AlignError> {
    let text = render_query(p);
    let mut rows = provider.embed(&[TextItem { id: &p.qid, text: &text }])?;
    if rows.len() != 1 {
        return Err(ProviderError::RowCount { expected: 1, got: rows.len() }.into());
    }
    Ok(rows.remove(0))
}

fn pair_for(p: &PaintingRecord, contexts: &ArtistContexts<'_>, query: &[f32]) -> Result<AlignedPair, AlignError> {
    if contexts.units.is_empty() {
        return Err(AlignError::NoContexts(p.creator_name.clone()));
    }
    let (row, similarity) = argmax_similarity(query, &contexts.vectors)?;
    let unit = contexts.units[row];
    Ok(AlignedPair {
        qid: p.qid.clone(),
        context_id: unit.id(),
        sentence: unit.window_text.clone(),
        similarity,
        label_text: build_label(p, &unit.window_text),
        image_ref: p.image_ref.clone(),
    })
}

/// Embeds the rendered query and returns the best-matching context.
pub fn align_painting(
    p: &PaintingRecord,
    contexts: &ArtistContexts<'_>,
    provider: &dyn EmbeddingProvider,
) -> Result<AlignedPair, AlignError> {
    check_record(p)?;
    if contexts.units.is_empty() {
        return Err(AlignError::NoContexts(p.creator_name.clone()));
    }
    let q = embed_query(p, provider)?;
    pair_for(p, contexts, &q)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlignOptions {
    pub min_sim: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AlignmentRun {
    /// Sorted by qid.
    pub pairs: Vec<AlignedPair>,
    /// Sorted by qid, then reason.
    pub unmatched: Vec<Unmatched>,
    /// Rendered-query vectors keyed by qid, for auditing similarities.
    pub queries: EmbeddingMatrix,
}

enum Outcome {
    Pair(AlignedPair, Vec<f32>),
    Skip(Unmatched, Option<Vec<f32>>),
}

fn unmatched(p: &PaintingRecord, reason: UnmatchedReason, similarity: Option<f64>) -> Unmatched {
    Unmatched { qid: p.qid.clone(), reason, creator_name: p.creator_name.clone(), similarity }
}

fn align_group(
    paintings: &[&PaintingRecord],
    contexts: Option<ArtistContexts<'_>>,
    provider: &dyn EmbeddingProvider,
    opts: &AlignOptions,
) -> Result<Vec<Outcome>, AlignError> {
    let Some(contexts) = contexts.filter(|c| !c.units.is_empty()) else {
        return Ok(paintings
            .iter()
            .map(|p| Outcome::Skip(unmatched(p, UnmatchedReason::NoContexts, None), None))
            .collect());
    };
    let texts: Vec<String> = paintings.iter().map(|p| render_query(p)).collect();
    let items: Vec<TextItem<'_>> =
        paintings.iter().zip(&texts).map(|(p, t)| TextItem { id: &p.qid, text: t }).collect();
    let vectors = provider.embed(&items)?;
    if vectors.len() != items.len() {
        return Err(ProviderError::RowCount { expected: items.len(), got: vectors.len() }.into());
    }
    let mut out = Vec::with_capacity(paintings.len());
    for (p, q) in paintings.iter().zip(vectors) {
        let outcome = match pair_for(p, &contexts, &q) {
            Ok(pair) => match opts.min_sim {
                Some(t) if pair.similarity < t => {
                    Outcome::Skip(unmatched(p, UnmatchedReason::BelowMinSim, Some(pair.similarity)), Some(q))
                }
                _ => Outcome::Pair(pair, q),
            },
            Err(AlignError::Search(SearchError::AllDegenerate)) => {
                Outcome::Skip(unmatched(p, UnmatchedReason::AllDegenerate, None), Some(q))
            }
            Err(AlignError::Search(SearchError::DegenerateQuery)) => {
                Outcome::Skip(unmatched(p, UnmatchedReason::DegenerateQuery, None), None)
            }
            Err(e) => return Err(e),
        };
        out.push(outcome);
    }
    Ok(out)
}

/// Aligns every painting. Paintings are grouped by normalized creator name
/// and groups run in parallel; output is ordered by qid regardless.
/// Repeated qids keep their first record and report the rest.
pub fn align_all(
    paintings: &[PaintingRecord],
    index: &ContextIndex<'_>,
    provider: &(dyn EmbeddingProvider + Sync),
    opts: &AlignOptions,
) -> Result<AlignmentRun, AlignError> {
    let mut seen = HashSet::new();
    let mut skipped = Vec::new();
    let mut groups: BTreeMap<String, Vec<&PaintingRecord>> = BTreeMap::new();
    for p in paintings {
        check_record(p)?;
        if !seen.insert(p.qid.as_str()) {
            skipped.push(unmatched(p, UnmatchedReason::DuplicateQid, None));
            continue;
        }
        groups.entry(normalize_name(&p.creator_name)).or_default().push(p);
    }

    let results: Vec<Vec<Outcome>> = groups
        .par_iter()
        .map(|(_, ps)| align_group(ps, index.for_artist(&ps[0].creator_name), provider, opts))
        .collect::<Result<_, _>>()?;

    let mut pairs = Vec::new();
    let mut query_rows: Vec<(String, Vec<f32>)> = Vec::new();
    for outcome in results.into_iter().flatten() {
        match outcome {
            Outcome::Pair(pair, q) => {
                query_rows.push((pair.qid.clone(), q));
                pairs.push(pair);
            }
            Outcome::Skip(u, q) => {
                if let Some(q) = q {
                    query_rows.push((u.qid.clone(), q));
                }
                skipped.push(u);
            }
        }
    }
    pairs.sort_by(|a, b| a.qid.cmp(&b.qid));
    skipped.sort_by(|a, b| a.qid.cmp(&b.qid).then((a.reason as u8).cmp(&(b.reason as u8))));
    query_rows.sort_by(|a, b| a.0.cmp(&b.0));
    let queries = EmbeddingMatrix::from_rows(provider.dim(), query_rows)
        .expect("qids are unique and rows match the provider dim");
    Ok(AlignmentRun { pairs, unmatched: skipped, queries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{cosine, HashProvider};

    fn painting(qid: &str, title: &str, creator: &str, year: Option<i32>, depicts: &[&str]) -> PaintingRecord {
        PaintingRecord {
            qid: qid.into(),
            title: title.into(),
            creator_name: creator.into(),
            creator_qid: String::new(),
            year,
            depicts: depicts.iter().map(|s| s.to_string()).collect(),
            movement: None,
            link_count: 0,
            image_ref: format!("images/{qid}.jpg"),
        }
    }

    fn cafe() -> PaintingRecord {
        painting(
            "Q1",
            "Café Terrace at Night",
            "Vincent van Gogh",
            Some(1888),
            &[
                "platform",
                "gas burner",
                "La Cité",
                "lamp",
                "sett",
                "Arles",
                "coffeehouse",
                "chair",
                "table",
                "tree",
                "night",
                "sky",
                "star",
                "human",
            ],
        )
    }

    fn unit(work: &str, index: usize, text: &str, artist: &str) -> ContextUnit {
        ContextUnit {
            work_id: work.into(),
            index,
            sentence: text.into(),
            window_text: text.into(),
            token_count: text.split_whitespace().count(),
            artists: vec![artist.into()],
        }
    }

    #[test]
    fn render_examples() {
        assert_eq!(
            render_query(&cafe()),
            "Café Terrace at Night is a 1888 painting by Vincent van Gogh depicting platform, gas burner, La Cité, lamp, sett, Arles, coffeehouse, chair, table, tree, night, sky, star, human"
        );
        assert_eq!(render_query(&painting("Q", "X", "Y", None, &[])), "X is a painting by Y");
        assert_eq!(
            render_query(&painting("Q", "X", "Y", Some(1700), &["dog"])),
            "X is a 1700 painting by Y depicting dog"
        );
        assert!(!render_query(&painting("Q", "X", "Y", None, &["", " "])).contains("  "));
    }

    #[test]
    fn label_examples() {
        assert_eq!(
            build_label(&cafe(), "Scholars note the star field."),
            format!("{} \u{2014} Scholars note the star field.", render_query(&cafe()))
        );
        let p = painting("Q", "X", "Y", None, &[]);
        assert_eq!(build_label(&p, "S."), "X is a painting by Y \u{2014} S.");
        assert_eq!(build_label(&p, ""), "X is a painting by Y");
    }

    #[test]
    fn names_normalize_for_grouping() {
        assert_eq!(normalize_name("Élisabeth Vigée Le Brun"), normalize_name("E\u{301}lisabeth VIGE\u{301}E le brun"));
        assert_ne!(normalize_name("Titian"), normalize_name("Tizian"));
    }

    #[test]
    fn exact_text_match_wins_with_similarity_one() {
        let p = painting("Q7", "X", "Y", Some(1700), &["dog"]);
        let units = vec![
            unit("W1", 0, "Something unrelated about frescoes in Padua.", "Y"),
            unit("W1", 1, &render_query(&p), "Y"),
            unit("W2", 0, "Another candidate sentence entirely.", "Y"),
        ];
        let provider = HashProvider::new(32);
        let vectors = crate::embedding::embed_contexts(&provider, &units, 64).unwrap();
        let index = ContextIndex::new(&units, &vectors).unwrap();
        let pair = align_painting(&p, &index.for_artist("y").unwrap(), &provider).unwrap();
        assert_eq!(pair.context_id, "W1#1");
        assert!((pair.similarity - 1.0).abs() < 1e-6);
    }

    #[test]
    fn argmax_matches_brute_force_and_stored_vectors() {
        let provider = HashProvider::new(16);
        let units: Vec<ContextUnit> =
            (0..10).map(|i| unit("W", i, &format!("context sentence number {i} about painting"), "Y")).collect();
        let vectors = crate::embedding::embed_contexts(&provider, &units, 3).unwrap();
        let index = ContextIndex::new(&units, &vectors).unwrap();
        let p = painting("Q2", "Portrait", "Y", Some(1650), &["woman"]);
        let pair = align_painting(&p, &index.for_artist("Y").unwrap(), &provider).unwrap();
        let q = provider.embed_text(&render_query(&p));
        let mut best = (0, f64::NEG_INFINITY);
        for i in 0..10 {
            let s = cosine(&q, vectors.row(i)).unwrap();
            if s > best.1 {
                best = (i, s);
            }
        }
        assert_eq!(pair.context_id, format!("W#{}", best.0));
        assert!((pair.similarity - best.1).abs() < 1e-6);
    }

    #[test]
    fn full_run_reports_unmatched_and_is_sorted() {
        let provider = HashProvider::new(8);
        let units = vec![unit("W1", 0, "alpha beta gamma delta", "Y"), unit("W1", 1, "epsilon zeta eta theta", "Y")];
        let vectors = crate::embedding::embed_contexts(&provider, &units, 64).unwrap();
        let index = ContextIndex::new(&units, &vectors).unwrap();
        let paintings = vec![
            painting("Q3", "C", "Y", None, &[]),
            painting("Q1", "A", "Nobody", None, &[]),
            painting("Q2", "B", "y", None, &[]),
            painting("Q3", "C again", "Y", None, &[]),
        ];
        let run = align_all(&paintings, &index, &provider, &AlignOptions::default()).unwrap();
        assert_eq!(run.pairs.iter().map(|p| p.qid.as_str()).collect::<Vec<_>>(), ["Q2", "Q3"]);
        assert_eq!(
            run.unmatched.iter().map(|u| (u.qid.as_str(), u.reason)).collect::<Vec<_>>(),
            [("Q1", UnmatchedReason::NoContexts), ("Q3", UnmatchedReason::DuplicateQid)]
        );
        assert_eq!(run.queries.ids(), ["Q2", "Q3"]);
        for pair in &run.pairs {
            let ctx = vectors.get(&pair.context_id).unwrap();
            let s = cosine(run.queries.get(&pair.qid).unwrap(), ctx).unwrap();
            assert!((s - pair.similarity).abs() < 1e-6);
        }

        let strict = align_all(&paintings, &index, &provider, &AlignOptions { min_sim: Some(1.1) }).unwrap();
        assert!(strict.pairs.is_empty());
        assert_eq!(strict.unmatched.iter().filter(|u| u.reason == UnmatchedReason::BelowMinSim).count(), 2);
    }

    #[test]
    fn direct_no_contexts_error() {
        let provider = HashProvider::new(8);
        let empty = ArtistContexts { units: Vec::new(), vectors: EmbeddingMatrix::empty(8).unwrap() };
        assert!(matches!(align_painting(&cafe(), &empty, &provider), Err(AlignError::NoContexts(_))));
    }

    #[test]
    fn missing_vector_rejected() {
        let units = vec![unit("W1", 0, "alpha beta gamma delta", "Y")];
        let vectors = EmbeddingMatrix::empty(4).unwrap();
        assert!(matches!(ContextIndex::new(&units, &vectors), Err(AlignError::MissingVector(_))));
    }
}
