//! Corpus discovery against an OpenAlex-compatible works API: per-artist
//! queries, the topic/relevance/language/open-access filter, and the
//! paginated harvest loop.

mod client;
mod harvest;

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use client::{
    parse_page, ClientError, FixtureClient, LiveClient, PageResult, WorksClient, API_BASE_ENV, DEFAULT_API_BASE,
};
pub use harvest::{
    harvest, ArtistHarvest, CrossArtistDuplicate, HarvestManifest, HarvestOptions, HarvestOutput, MalformedPage,
    StopReason,
};

use crate::io_util::{read_jsonl, JsonlError};

pub const DEFAULT_RHO: f64 = 1.0;
pub const DEFAULT_PER_PAGE: u32 = 50;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtistRecord {
    pub artist_id: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkRecord {
    pub work_id: String,
    pub title: String,
    pub tags: BTreeSet<String>,
    pub relevance: f64,
    pub language: String,
    pub oa_pdf_url: Option<String>,
    pub artist_id: String,
    #[serde(default)]
    pub byte_size: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicFilter {
    pub art_topics: BTreeSet<String>,
    pub rho: f64,
}

#[derive(Debug, Error)]
pub enum DiscoveryError {
    #[error("topic set is empty")]
    EmptyTopics,
    #[error("rho must be finite and >= 0, got {0}")]
    BadRho(f64),
    #[error("duplicate artist_id {0:?} in roster")]
    DuplicateArtist(String),
    #[error("artist {0:?} has an empty name")]
    EmptyName(String),
    #[error("page must be >= 1")]
    ZeroPage,
    #[error("bad API base URL {0:?}")]
    BadBase(String),
    #[error(transparent)]
    Roster(#[from] JsonlError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TopicFilter {
    pub fn new<I, S>(topics: I, rho: f64) -> Result<Self, DiscoveryError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let art_topics: BTreeSet<String> = topics.into_iter().map(Into::into).collect();
        if art_topics.is_empty() {
            return Err(DiscoveryError::EmptyTopics);
        }
        if !(rho.is_finite() && rho >= 0.0) {
            return Err(DiscoveryError::BadRho(rho));
        }
        Ok(Self { art_topics, rho })
    }

    /// One topic id per line; blank lines and `#` comments are ignored.
    pub fn load(path: &Path, rho: f64) -> Result<Self, DiscoveryError> {
        let text = fs::read_to_string(path)?;
        let topics = text.lines().map(|l| l.split('#').next().unwrap_or("").trim()).filter(|l| !l.is_empty());
        Self::new(topics.map(short_id), rho)
    }
}

/// Strips an `https://openalex.org/` style prefix, keeping the bare id.
pub fn short_id(id: &str) -> String {
    id.rsplit('/').next().unwrap_or(id).to_string()
}

pub fn validate_roster(roster: &[ArtistRecord]) -> Result<(), DiscoveryError> {
    let mut seen = HashSet::new();
    for a in roster {
        if a.name.trim().is_empty() {
            return Err(DiscoveryError::EmptyName(a.artist_id.clone()));
        }
        if !seen.insert(a.artist_id.as_str()) {
            return Err(DiscoveryError::DuplicateArtist(a.artist_id.clone()));
        }
    }
    Ok(())
}

pub fn load_roster(path: &Path) -> Result<Vec<ArtistRecord>, DiscoveryError> {
    let roster: Vec<ArtistRecord> = read_jsonl(path)?;
    validate_roster(&roster)?;
    Ok(roster)
}

pub fn is_english(language: &str) -> bool {
    let l = language.trim().to_ascii_lowercase();
    l == "en" || l.starts_with("en-") || l == "eng"
}

/// Keeps a work iff it carries an art topic, `relevance > rho` (strict), is
/// English, and has an open-access PDF link.
pub fn filter_work(work: &WorkRecord, filter: &TopicFilter) -> bool {
    let topical = work.tags.iter().any(|t| filter.art_topics.contains(t));
    let relevant = work.relevance > filter.rho;
    let has_pdf = work.oa_pdf_url.as_deref().is_some_and(|u| !u.trim().is_empty());
    topical && relevant && is_english(&work.language) && has_pdf
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub url: String,
    pub params: Vec<(String, String)>,
    pub artist_id: String,
    pub page: u32,
}

/// `GET <base>/works?search=<name>&filter=language:en,open_access.is_oa:true&sort=relevance_score:desc&per-page=N&page=P`.
/// PDF availability is not a server-side filter on every deployment, so
/// [`filter_work`] checks it on the parsed record.
pub fn build_artist_query(
    base: &str,
    artist: &ArtistRecord,
    page: u32,
    per_page: u32,
) -> Result<QuerySpec, DiscoveryError> {
    if page == 0 {
        return Err(DiscoveryError::ZeroPage);
    }
    let endpoint = format!("{}/works", base.trim_end_matches('/'));
    let params = vec![
        ("search".to_string(), artist.name.clone()),
        ("filter".to_string(), "language:en,open_access.is_oa:true".to_string()),
        ("sort".to_string(), "relevance_score:desc".to_string()),
        ("per-page".to_string(), per_page.to_string()),
        ("page".to_string(), page.to_string()),
    ];
    let url = url::Url::parse_with_params(&endpoint, &params).map_err(|_| DiscoveryError::BadBase(base.to_string()))?;
    Ok(QuerySpec { url: url.into(), params, artist_id: artist.artist_id.clone(), page })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn work(tags: &[&str], relevance: f64, lang: &str, pdf: bool) -> WorkRecord {
        WorkRecord {
            work_id: "W1".into(),
            title: "t".into(),
            tags: tags.iter().map(|s| s.to_string()).collect(),
            relevance,
            language: lang.into(),
            oa_pdf_url: pdf.then(|| "https://example.org/a.pdf".to_string()),
            artist_id: "A1".into(),
            byte_size: None,
        }
    }

    fn filter() -> TopicFilter {
        TopicFilter::new(["T1", "T2"], 1.0).unwrap()
    }

    #[test]
    fn filter_examples() {
        assert!(filter_work(&work(&["T1"], 2.5, "en", true), &filter()));
        assert!(!filter_work(&work(&["T1"], 1.0, "en", true), &filter()));
        assert!(!filter_work(&work(&["T9"], 3.0, "en", true), &filter()));
    }

    #[test]
    fn filter_is_a_pure_conjunction() {
        let f = filter();
        let base = work(&["T1"], 2.0, "en", true);
        assert!(filter_work(&base, &f));
        let broken = [
            work(&["T9"], 2.0, "en", true),
            work(&["T1"], 0.5, "en", true),
            work(&["T1"], 2.0, "fr", true),
            work(&["T1"], 2.0, "en", false),
        ];
        for b in &broken {
            assert!(!filter_work(b, &f));
        }
        // a record failing exactly one conjunct passes once that conjunct is fixed
        let mut w = broken[2].clone();
        w.language = "en".into();
        assert!(filter_work(&w, &f));
    }

    #[test]
    fn topic_filter_validation() {
        assert!(matches!(TopicFilter::new(Vec::<String>::new(), 1.0), Err(DiscoveryError::EmptyTopics)));
        assert!(matches!(TopicFilter::new(["T1"], -0.1), Err(DiscoveryError::BadRho(_))));
    }

    #[test]
    fn topics_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("topics.txt");
        fs::write(&p, "# art topics\nT10\n\nhttps://openalex.org/T11  # with prefix\n").unwrap();
        let f = TopicFilter::load(&p, 1.0).unwrap();
        assert_eq!(f.art_topics.iter().collect::<Vec<_>>(), ["T10", "T11"]);
    }

    #[test]
    fn roster_validation() {
        let a = |id: &str, name: &str| ArtistRecord { artist_id: id.into(), name: name.into() };
        assert!(validate_roster(&[a("1", "X"), a("2", "Y")]).is_ok());
        assert!(matches!(validate_roster(&[a("1", "X"), a("1", "Y")]), Err(DiscoveryError::DuplicateArtist(_))));
        assert!(matches!(validate_roster(&[a("1", " ")]), Err(DiscoveryError::EmptyName(_))));
    }

    fn percent_decode(s: &str) -> String {
        let b = s.as_bytes();
        let mut out = Vec::new();
        let mut i = 0;
        while i < b.len() {
            match b[i] {
                b'+' => out.push(b' '),
                b'%' => {
                    out.push(u8::from_str_radix(std::str::from_utf8(&b[i + 1..i + 3]).unwrap(), 16).unwrap());
                    i += 2;
                }
                c => out.push(c),
            }
            i += 1;
        }
        String::from_utf8(out).unwrap()
    }

    fn query_param(url: &str, key: &str) -> Option<String> {
        let q = url.split_once('?')?.1;
        q.split('&').find_map(|kv| {
            let (k, v) = kv.split_once('=')?;
            (k == key).then(|| percent_decode(v))
        })
    }

    #[test]
    fn query_contents() {
        let titian = ArtistRecord { artist_id: "A1".into(), name: "Titian".into() };
        let q = build_artist_query("https://api.openalex.org", &titian, 1, 50).unwrap();
        assert_eq!(query_param(&q.url, "search").as_deref(), Some("Titian"));
        let f = query_param(&q.url, "filter").unwrap();
        assert!(f.contains("language:en") && f.contains("open_access.is_oa:true"));
        assert_eq!(query_param(&q.url, "sort").as_deref(), Some("relevance_score:desc"));
        assert_eq!(query_param(&q.url, "page").as_deref(), Some("1"));
        assert_eq!(q.url, build_artist_query("https://api.openalex.org/", &titian, 1, 50).unwrap().url);
        assert!(matches!(build_artist_query("https://x", &titian, 0, 50), Err(DiscoveryError::ZeroPage)));
    }

    #[test]
    fn pages_differ_only_in_page_param() {
        let vg = ArtistRecord { artist_id: "A2".into(), name: "Vincent van Gogh".into() };
        let p1 = build_artist_query("https://api.openalex.org", &vg, 1, 50).unwrap().url;
        let p3 = build_artist_query("https://api.openalex.org", &vg, 3, 50).unwrap().url;
        assert_eq!(p1.replace("page=1", "page=3"), p3);
        assert_eq!(p1.matches("page=1").count(), 1);
    }

    #[test]
    fn diacritics_round_trip_through_percent_encoding() {
        let name = "Élisabeth Vigée Le Brun";
        let a = ArtistRecord { artist_id: "A3".into(), name: name.into() };
        let q = build_artist_query("https://api.openalex.org", &a, 1, 50).unwrap();
        assert!(q.url.is_ascii());
        assert!(!q.url.contains(' '));
        assert_eq!(query_param(&q.url, "search").unwrap(), name);
    }
}
