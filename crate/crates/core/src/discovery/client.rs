use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde_json::Value;
use thiserror::Error;

use super::{short_id, QuerySpec, WorkRecord};

pub const API_BASE_ENV: &str = "ARTCONTEXT_API_BASE";
pub const DEFAULT_API_BASE: &str = "https://api.openalex.org";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("network error: {0}")]
    Network(String),
    #[error("rate limited (retry after {retry_after:?})")]
    RateLimited { retry_after: Option<Duration> },
    /// Non-retryable HTTP failure.
    #[error("HTTP status {0}")]
    Status(u16),
}

impl ClientError {
    pub fn is_retryable(&self) -> bool {
        !matches!(self, ClientError::Status(_))
    }
}

/// Fetches one raw page body for a query.
pub trait WorksClient: Sync {
    fn fetch(&self, query: &QuerySpec) -> Result<String, ClientError>;

    /// Base URL the client expects queries to be built against.
    fn base(&self) -> &str;
}

pub struct LiveClient {
    base: String,
    http: reqwest::blocking::Client,
}

impl LiveClient {
    pub fn new(base: impl Into<String>) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder()
            .user_agent(concat!("artcontext/", env!("CARGO_PKG_VERSION")))
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| ClientError::Network(e.to_string()))?;
        Ok(Self { base: base.into(), http })
    }

    /// Base URL from `ARTCONTEXT_API_BASE`, falling back to the public API.
    pub fn from_env() -> Result<Self, ClientError> {
        Self::new(std::env::var(API_BASE_ENV).unwrap_or_else(|_| DEFAULT_API_BASE.to_string()))
    }
}

impl WorksClient for LiveClient {
    fn fetch(&self, query: &QuerySpec) -> Result<String, ClientError> {
        let resp = self.http.get(&query.url).send().map_err(|e| ClientError::Network(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 {
            let retry_after = resp
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<u64>().ok())
                .map(Duration::from_secs);
            return Err(ClientError::RateLimited { retry_after });
        }
        if status.is_server_error() {
            return Err(ClientError::Network(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(ClientError::Status(status.as_u16()));
        }
        resp.text().map_err(|e| ClientError::Network(e.to_string()))
    }

    fn base(&self) -> &str {
        &self.base
    }
}

/// Canned pages at `<dir>/<artist_id>/page_<n>.json`. A missing page reads
/// as an empty result list, which ends pagination.
pub struct FixtureClient {
    dir: PathBuf,
}

impl FixtureClient {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl WorksClient for FixtureClient {
    fn fetch(&self, query: &QuerySpec) -> Result<String, ClientError> {
        let path = self.dir.join(&query.artist_id).join(format!("page_{}.json", query.page));
        match fs::read_to_string(&path) {
            Ok(s) => Ok(s),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(r#"{"meta":{},"results":[]}"#.to_string()),
            Err(e) => Err(ClientError::Network(format!("{}: {e}", path.display()))),
        }
    }

    fn base(&self) -> &str {
        "fixture://works"
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PageResult {
    pub works: Vec<WorkRecord>,
    /// `meta.count`, when the response carries it.
    pub total: Option<u64>,
}

fn str_field<'a>(v: &'a Value, key: &str) -> Option<&'a str> {
    v.get(key).and_then(Value::as_str)
}

/// Parses an OpenAlex `/works` response. Any structural problem makes the
/// whole page malformed; the message says where.
pub fn parse_page(body: &str, artist_id: &str) -> Result<PageResult, String> {
    let v: Value = serde_json::from_str(body).map_err(|e| format!("invalid JSON: {e}"))?;
    let results = v.get("results").and_then(Value::as_array).ok_or("missing results array")?;
    let total = v.pointer("/meta/count").and_then(Value::as_u64);
    let mut works = Vec::with_capacity(results.len());
    for (i, r) in results.iter().enumerate() {
        let id = str_field(r, "id").ok_or_else(|| format!("result {i}: missing id"))?;
        let relevance = match r.get("relevance_score") {
            None | Some(Value::Null) => 0.0,
            Some(x) => {
                x.as_f64().filter(|s| s.is_finite()).ok_or_else(|| format!("result {i}: bad relevance_score"))?
            }
        };
        let title = str_field(r, "title").or_else(|| str_field(r, "display_name")).unwrap_or("");
        let tags = r
            .get("topics")
            .and_then(Value::as_array)
            .map(|ts| ts.iter().filter_map(|t| str_field(t, "id")).map(short_id).collect())
            .unwrap_or_default();
        let oa_pdf_url = r
            .pointer("/best_oa_location/pdf_url")
            .and_then(Value::as_str)
            .filter(|u| !u.is_empty())
            .map(str::to_string);
        works.push(WorkRecord {
            work_id: short_id(id),
            title: title.to_string(),
            tags,
            relevance: relevance.max(0.0),
            language: str_field(r, "language").unwrap_or("").to_string(),
            oa_pdf_url,
            artist_id: artist_id.to_string(),
            byte_size: None,
        });
    }
    Ok(PageResult { works, total })
}
