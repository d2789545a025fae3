use std::collections::{BTreeMap, HashSet};
use std::thread;
use std::time::Duration;

use chrono::{SecondsFormat, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::client::{parse_page, ClientError, WorksClient};
use super::{
    build_artist_query, filter_work, validate_roster, ArtistRecord, DiscoveryError, TopicFilter, WorkRecord,
    DEFAULT_PER_PAGE,
};

#[derive(Debug, Clone, PartialEq)]
pub struct HarvestOptions {
    pub per_page: u32,
    /// Hard cap on pages per artist.
    pub max_pages: u32,
    pub max_attempts: u32,
    /// First retry delay; doubles on each further attempt.
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for HarvestOptions {
    fn default() -> Self {
        Self {
            per_page: DEFAULT_PER_PAGE,
            max_pages: 200,
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(60),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Exhausted,
    RelevanceBelowRho,
    PageCap,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MalformedPage {
    pub page: u32,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtistHarvest {
    pub artist_id: String,
    pub name: String,
    pub pages_fetched: u32,
    pub works_seen: usize,
    pub works_retained: usize,
    pub duplicates_dropped: usize,
    pub retries: u32,
    pub stop_reason: StopReason,
    /// Set when a page arrived out of relevance order, which disables the
    /// early stop for the rest of this artist.
    pub exhaustive_fallback: bool,
    pub malformed_pages: Vec<MalformedPage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub started_at: String,
    pub finished_at: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossArtistDuplicate {
    pub work_id: String,
    pub artist_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarvestManifest {
    pub started_at: String,
    pub finished_at: String,
    pub rho: f64,
    pub art_topics: Vec<String>,
    pub per_page: u32,
    pub total_works: usize,
    pub artists: Vec<ArtistHarvest>,
    pub cross_artist_duplicates: Vec<CrossArtistDuplicate>,
}

impl HarvestManifest {
    /// Copy with every timestamp blanked, for run-to-run comparison.
    pub fn without_timestamps(&self) -> Self {
        let mut m = self.clone();
        m.started_at.clear();
        m.finished_at.clear();
        for a in &mut m.artists {
            a.started_at.clear();
            a.finished_at.clear();
        }
        m
    }

    pub fn failed_artists(&self) -> usize {
        self.artists.iter().filter(|a| a.error.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarvestOutput {
    /// Grouped by artist in roster order; API order within an artist.
    pub works: Vec<WorkRecord>,
    pub manifest: HarvestManifest,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn backoff(opts: &HarvestOptions, attempt: u32) -> Duration {
    let factor = 1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX);
    opts.base_delay.saturating_mul(factor).min(opts.max_delay)
}

fn fetch_with_retry(
    client: &dyn WorksClient,
    q: &super::QuerySpec,
    opts: &HarvestOptions,
    retries: &mut u32,
) -> Result<String, ClientError> {
    let mut attempt = 1;
    loop {
        match client.fetch(q) {
            Ok(body) => return Ok(body),
            Err(e) if !e.is_retryable() || attempt >= opts.max_attempts => return Err(e),
            Err(e) => {
                let delay = match &e {
                    ClientError::RateLimited { retry_after: Some(d) } => *d,
                    _ => backoff(opts, attempt),
                };
                log::warn!("artist {} page {}: {e}; retrying in {delay:?}", q.artist_id, q.page);
                thread::sleep(delay);
                *retries += 1;
                attempt += 1;
            }
        }
    }
}

fn harvest_artist(
    artist: &ArtistRecord,
    filter: &TopicFilter,
    client: &dyn WorksClient,
    opts: &HarvestOptions,
) -> (Vec<WorkRecord>, ArtistHarvest) {
    let mut report = ArtistHarvest {
        artist_id: artist.artist_id.clone(),
        name: artist.name.clone(),
        pages_fetched: 0,
        works_seen: 0,
        works_retained: 0,
        duplicates_dropped: 0,
        retries: 0,
        stop_reason: StopReason::PageCap,
        exhaustive_fallback: false,
        malformed_pages: Vec::new(),
        error: None,
        started_at: now(),
        finished_at: String::new(),
    };
    let mut kept = Vec::new();
    let mut seen = HashSet::new();
    let mut last_relevance = f64::INFINITY;
    let mut fetched_items: u64 = 0;

    for page in 1..=opts.max_pages {
        let q = match build_artist_query(client.base(), artist, page, opts.per_page) {
            Ok(q) => q,
            Err(e) => {
                report.error = Some(e.to_string());
                report.stop_reason = StopReason::Failed;
                break;
            }
        };
        let body = match fetch_with_retry(client, &q, opts, &mut report.retries) {
            Ok(b) => b,
            Err(e) => {
                report.error = Some(format!("page {page}: {e}"));
                report.stop_reason = StopReason::Failed;
                break;
            }
        };
        report.pages_fetched += 1;
        let parsed = match parse_page(&body, &artist.artist_id) {
            Ok(p) => p,
            Err(error) => {
                log::warn!("artist {} page {page} malformed: {error}", artist.artist_id);
                report.malformed_pages.push(MalformedPage { page, error });
                continue;
            }
        };
        if parsed.works.is_empty() {
            report.stop_reason = StopReason::Exhausted;
            break;
        }
        fetched_items += parsed.works.len() as u64;

        let sorted = parsed.works.iter().all(|w| {
            let ok = w.relevance <= last_relevance;
            last_relevance = w.relevance;
            ok
        });
        if !sorted && !report.exhaustive_fallback {
            log::warn!("artist {} page {page} is not relevance-sorted; paginating exhaustively", artist.artist_id);
            report.exhaustive_fallback = true;
        }
        let page_len = parsed.works.len();
        let tail = parsed.works.last().map(|w| w.relevance).unwrap_or(0.0);
        for w in parsed.works {
            report.works_seen += 1;
            if !seen.insert(w.work_id.clone()) {
                report.duplicates_dropped += 1;
                continue;
            }
            if filter_work(&w, filter) {
                kept.push(w);
            }
        }

        if !report.exhaustive_fallback && tail <= filter.rho {
            report.stop_reason = StopReason::RelevanceBelowRho;
            break;
        }
        let short_page = page_len < opts.per_page as usize;
        let counted_out = parsed.total.is_some_and(|t| fetched_items >= t);
        if short_page || counted_out {
            report.stop_reason = StopReason::Exhausted;
            break;
        }
    }
    report.works_retained = kept.len();
    report.finished_at = now();
    (kept, report)
}

/// Harvests every artist (in parallel) and assembles the manifest in roster
/// order. Artists whose requests fail after all retries are recorded with
/// an error and keep whatever pages were retrieved before the failure.
pub fn harvest(
    roster: &[ArtistRecord],
    filter: &TopicFilter,
    client: &dyn WorksClient,
    opts: &HarvestOptions,
) -> Result<HarvestOutput, DiscoveryError> {
    validate_roster(roster)?;
    let started_at = now();
    let results: Vec<(Vec<WorkRecord>, ArtistHarvest)> =
        roster.par_iter().map(|a| harvest_artist(a, filter, client, opts)).collect();

    let mut owners: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for (works, _) in &results {
        for w in works {
            owners.entry(w.work_id.as_str()).or_default().push(w.artist_id.clone());
        }
    }
    let cross_artist_duplicates = owners
        .into_iter()
        .filter(|(_, ids)| ids.len() > 1)
        .map(|(work_id, artist_ids)| CrossArtistDuplicate { work_id: work_id.to_string(), artist_ids })
        .collect();

    let mut works = Vec::new();
    let mut artists = Vec::with_capacity(results.len());
    for (w, report) in results {
        works.extend(w);
        artists.push(report);
    }
    let manifest = HarvestManifest {
        started_at,
        finished_at: now(),
        rho: filter.rho,
        art_topics: filter.art_topics.iter().cloned().collect(),
        per_page: opts.per_page,
        total_works: works.len(),
        artists,
        cross_artist_duplicates,
    };
    Ok(HarvestOutput { works, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discovery::QuerySpec;
    use serde_json::json;
    use std::collections::HashMap;
    use std::sync::Mutex;

    /// Pages keyed by (artist_id, page); scripted failures are consumed
    /// front to back before a page is served.
    struct ScriptClient {
        pages: HashMap<(String, u32), String>,
        failures: Mutex<Vec<ClientError>>,
        calls: Mutex<Vec<(String, u32)>>,
    }

    impl ScriptClient {
        fn new() -> Self {
            Self { pages: HashMap::new(), failures: Mutex::new(Vec::new()), calls: Mutex::new(Vec::new()) }
        }

        fn page(mut self, artist: &str, page: u32, works: &[(&str, f64, &str)]) -> Self {
            let results: Vec<_> = works
                .iter()
                .map(|(id, rel, topic)| {
                    json!({"id": id, "title": id, "relevance_score": rel, "language": "en",
                           "topics": [{"id": topic}], "best_oa_location": {"pdf_url": format!("https://x/{id}.pdf")}})
                })
                .collect();
            self.pages.insert((artist.into(), page), json!({"results": results}).to_string());
            self
        }

        fn raw(mut self, artist: &str, page: u32, body: &str) -> Self {
            self.pages.insert((artist.into(), page), body.into());
            self
        }
    }

    impl WorksClient for ScriptClient {
        fn fetch(&self, q: &QuerySpec) -> Result<String, ClientError> {
            self.calls.lock().unwrap().push((q.artist_id.clone(), q.page));
            let mut f = self.failures.lock().unwrap();
            if !f.is_empty() {
                return Err(f.remove(0));
            }
            Ok(self.pages.get(&(q.artist_id.clone(), q.page)).cloned().unwrap_or_else(|| r#"{"results":[]}"#.into()))
        }

        fn base(&self) -> &str {
            "https://api.test"
        }
    }

    fn opts(per_page: u32) -> HarvestOptions {
        HarvestOptions { per_page, base_delay: Duration::ZERO, ..HarvestOptions::default() }
    }

    fn artist(id: &str, name: &str) -> ArtistRecord {
        ArtistRecord { artist_id: id.into(), name: name.into() }
    }

    fn topics() -> TopicFilter {
        TopicFilter::new(["T1", "T2"], 1.0).unwrap()
    }

    #[test]
    fn two_artists_three_works_each() {
        let c = ScriptClient::new().page("A1", 1, &[("W1", 5.0, "T1"), ("W2", 4.0, "T9"), ("W3", 3.0, "T2")]).page(
            "A2",
            1,
            &[("W4", 5.0, "T2"), ("W5", 4.0, "T1"), ("W6", 3.0, "T8")],
        );
        let out = harvest(&[artist("A1", "X"), artist("A2", "Y")], &topics(), &c, &opts(3)).unwrap();
        let ids: Vec<_> = out.works.iter().map(|w| (w.artist_id.as_str(), w.work_id.as_str())).collect();
        assert_eq!(ids, [("A1", "W1"), ("A1", "W3"), ("A2", "W4"), ("A2", "W5")]);
        assert_eq!(out.manifest.artists.iter().map(|a| a.works_retained).collect::<Vec<_>>(), [2, 2]);
        assert!(out.works.iter().all(|w| filter_work(w, &topics())));
    }

    #[test]
    fn empty_roster() {
        let out = harvest(&[], &topics(), &ScriptClient::new(), &opts(3)).unwrap();
        assert!(out.works.is_empty());
        assert!(out.manifest.artists.is_empty());
        assert_eq!(out.manifest.total_works, 0);
    }

    #[test]
    fn early_stop_once_relevance_reaches_rho() {
        let c = ScriptClient::new().page("A1", 1, &[("W1", 2.0, "T1"), ("W2", 1.0, "T1"), ("W3", 0.5, "T1")]).page(
            "A1",
            2,
            &[("W4", 0.4, "T1"), ("W5", 0.3, "T1"), ("W6", 0.2, "T1")],
        );
        let out = harvest(&[artist("A1", "X")], &topics(), &c, &opts(3)).unwrap();
        assert_eq!(out.works.len(), 1);
        assert_eq!(out.manifest.artists[0].stop_reason, StopReason::RelevanceBelowRho);
        assert_eq!(*c.calls.lock().unwrap(), [("A1".to_string(), 1)]);
    }

    #[test]
    fn unsorted_page_falls_back_to_exhaustive() {
        let c = ScriptClient::new().page("A1", 1, &[("W1", 0.5, "T1"), ("W2", 3.0, "T1"), ("W3", 0.2, "T1")]).page(
            "A1",
            2,
            &[("W4", 4.0, "T1")],
        );
        let out = harvest(&[artist("A1", "X")], &topics(), &c, &opts(3)).unwrap();
        let a = &out.manifest.artists[0];
        assert!(a.exhaustive_fallback);
        assert_eq!(a.stop_reason, StopReason::Exhausted);
        assert_eq!(out.works.iter().map(|w| w.work_id.as_str()).collect::<Vec<_>>(), ["W2", "W4"]);
    }

    #[test]
    fn duplicates_across_pages_and_artists() {
        let c = ScriptClient::new()
            .page("A1", 1, &[("W1", 5.0, "T1"), ("W2", 4.0, "T1")])
            .page("A1", 2, &[("W2", 3.0, "T1"), ("W3", 2.0, "T1")])
            .page("A2", 1, &[("W1", 5.0, "T1")]);
        let out = harvest(&[artist("A1", "X"), artist("A2", "Y")], &topics(), &c, &opts(2)).unwrap();
        let a1: Vec<_> = out.works.iter().filter(|w| w.artist_id == "A1").map(|w| w.work_id.as_str()).collect();
        assert_eq!(a1, ["W1", "W2", "W3"]);
        assert_eq!(out.manifest.artists[0].duplicates_dropped, 1);
        assert_eq!(
            out.manifest.cross_artist_duplicates,
            [CrossArtistDuplicate { work_id: "W1".into(), artist_ids: vec!["A1".into(), "A2".into()] }]
        );
    }

    #[test]
    fn malformed_page_is_skipped_and_recorded() {
        let c = ScriptClient::new().raw("A1", 1, "{oops").page("A1", 2, &[("W1", 5.0, "T1")]);
        let out = harvest(&[artist("A1", "X")], &topics(), &c, &opts(3)).unwrap();
        let a = &out.manifest.artists[0];
        assert_eq!(a.malformed_pages.len(), 1);
        assert_eq!(a.malformed_pages[0].page, 1);
        assert_eq!(out.works.len(), 1);
    }

    #[test]
    fn retries_network_errors_then_succeeds() {
        let c = ScriptClient::new().page("A1", 1, &[("W1", 5.0, "T1")]);
        *c.failures.lock().unwrap() =
            vec![ClientError::Network("reset".into()), ClientError::RateLimited { retry_after: Some(Duration::ZERO) }];
        let out = harvest(&[artist("A1", "X")], &topics(), &c, &opts(3)).unwrap();
        assert_eq!(out.manifest.artists[0].retries, 2);
        assert_eq!(out.works.len(), 1);
    }

    #[test]
    fn gives_up_after_max_attempts() {
        let c = ScriptClient::new().page("A1", 1, &[("W1", 5.0, "T1")]);
        *c.failures.lock().unwrap() = vec![ClientError::Network("down".into()); 5];
        let out = harvest(&[artist("A1", "X")], &topics(), &c, &opts(3)).unwrap();
        let a = &out.manifest.artists[0];
        assert_eq!(a.stop_reason, StopReason::Failed);
        assert_eq!(a.retries, 4);
        assert_eq!(c.calls.lock().unwrap().len(), 5);
        assert_eq!(out.manifest.failed_artists(), 1);
    }

    #[test]
    fn status_errors_are_not_retried() {
        let c = ScriptClient::new();
        *c.failures.lock().unwrap() = vec![ClientError::Status(404)];
        let out = harvest(&[artist("A1", "X")], &topics(), &c, &opts(3)).unwrap();
        assert_eq!(c.calls.lock().unwrap().len(), 1);
        assert!(out.manifest.artists[0].error.is_some());
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let o = HarvestOptions {
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(350),
            ..HarvestOptions::default()
        };
        assert_eq!(backoff(&o, 1), Duration::from_millis(100));
        assert_eq!(backoff(&o, 2), Duration::from_millis(200));
        assert_eq!(backoff(&o, 3), Duration::from_millis(350));
        assert_eq!(backoff(&o, 40), Duration::from_millis(350));
    }

    #[test]
    fn idempotent_modulo_timestamps() {
        let c = ScriptClient::new().page("A1", 1, &[("W1", 5.0, "T1"), ("W2", 0.5, "T1")]).page(
            "A2",
            1,
            &[("W3", 5.0, "T2")],
        );
        let roster = [artist("A1", "X"), artist("A2", "Y")];
        let a = harvest(&roster, &topics(), &c, &opts(3)).unwrap();
        let b = harvest(&roster, &topics(), &c, &opts(3)).unwrap();
        assert_eq!(a.works, b.works);
        assert_eq!(a.manifest.without_timestamps(), b.manifest.without_timestamps());
    }
}
