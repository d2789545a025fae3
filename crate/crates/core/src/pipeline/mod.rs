//! Stage orchestration. Each stage writes its artifacts plus a
//! `manifest.json` (input/output digests, record counts, timing) into its
//! own directory. Before running, a stage verifies that every upstream
//! artifact it reads still matches the digest its producer recorded, and
//! refuses to run otherwise unless forced.

mod config;
mod features;
mod retrieve;
mod stages;

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    AlignSection, EmbedSection, EvalSection, ExtractSection, FeaturesSection, HarvestSection, PipelineConfig,
    RunSection, TrainSection,
};
pub use features::{synthesize, BagOfWords, FeatureDims, FeatureSet};
pub use retrieve::{retrieve_topk, RetrieveMode, RetrievedSentence};
pub use stages::{
    eval_score_files, resolve_api_base, score_queries, write_eval_outputs, DocumentRejection, RejectionRecord,
    ADAPTED_SCORES, BASELINE_SCORES, CONTEXTS, CONTEXT_VECTORS, CTX_FEATS, HARVEST_REPORT, IMG_FEATS, IMG_PROJ,
    LOSS_HISTORY, PAIRS, PR_CSV, QUERY_VECTORS, REJECTIONS, REPORT, TEXT_ADAPTER, TXT_FEATS, TXT_PROJ, UNMATCHED,
    VISUAL_ADAPTER, WORKS,
};

use crate::io_util::{file_digest, sha256_hex, write_json};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Harvest,
    Extract,
    Embed,
    Align,
    Features,
    Train,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::Harvest, Stage::Extract, Stage::Embed, Stage::Align, Stage::Features, Stage::Train, Stage::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Harvest => "harvest",
            Stage::Extract => "extract",
            Stage::Embed => "embed",
            Stage::Align => "align",
            Stage::Features => "features",
            Stage::Train => "train",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Validation(String),
    #[error("{stage}: stale or missing inputs (use --force to run anyway):\n  {}", problems.join("\n  "))]
    StaleInput { stage: Stage, problems: Vec<String> },
    #[error("{stage} failed: {message}")]
    StageFailure { stage: Stage, message: String },
    #[error("unknown painting {0:?}")]
    UnknownPainting(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl PipelineError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        PipelineError::Io { path: path.to_path_buf(), source }
    }

    pub fn stage(stage: Stage, err: impl fmt::Display) -> Self {
        PipelineError::StageFailure { stage, message: err.to_string() }
    }

    /// 1 validation, 2 stage failure, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) | PipelineError::StaleInput { .. } | PipelineError::UnknownPainting(_) => 1,
            PipelineError::StageFailure { .. } => 2,
            PipelineError::Io { .. } => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatVersions {
    pub emb: u32,
    pub lora: u32,
    pub abbreviations: String,
}

impl FormatVersions {
    pub fn current() -> Self {
        Self {
            emb: crate::embedding::FORMAT_VERSION,
            lora: crate::lora::ADAPTER_VERSION,
            abbreviations: crate::extract::RuleSegmenter::shipped().abbreviation_list_version().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub records_in: usize,
    pub records_out: usize,
    pub records_errored: usize,
}

impl Counts {
    pub fn reconciles(&self) -> bool {
        self.records_out + self.records_errored == self.records_in
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: Stage,
    pub tool_version: String,
    pub format_versions: FormatVersions,
    pub started_at: String,
    pub wall_clock_secs: f64,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the stage directory.
    pub outputs: Vec<FileDigest>,
    pub counts: Counts,
    pub forced: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stale_inputs: Vec<String>,
    pub details: serde_json::Value,
}

impl StageManifest {
    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))
    }

    /// Outputs whose current digest differs from the recorded one.
    pub fn verify_outputs(&self, dir: &Path) -> Vec<String> {
        self.outputs
            .iter()
            .filter_map(|o| match digest_path(&dir.join(&o.path)) {
                Ok(d) if d == o.sha256 => None,
                Ok(_) => Some(format!("{} changed since {} wrote it", dir.join(&o.path).display(), self.stage)),
                Err(e) => Some(format!("{}: {e}", dir.join(&o.path).display())),
            })
            .collect()
    }
}

/// SHA-256 of a file, or for a directory of the sorted `name\tdigest`
/// listing of its regular files (recursively).
pub fn digest_path(path: &Path) -> io::Result<String> {
    if !path.is_dir() {
        return file_digest(path);
    }
    let mut entries = Vec::new();
    collect_files(path, path, &mut entries)?;
    entries.sort();
    let listing: String = entries.into_iter().map(|(n, d)| format!("{n}\t{d}\n")).collect();
    Ok(sha256_hex(listing.as_bytes()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<(String, String)>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
            out.push((rel, file_digest(&p)?));
        }
    }
    Ok(())
}

/// Where an input comes from, which decides how it is checked.
#[derive(Debug, Clone, PartialEq)]
pub enum InputKind {
    /// Default location of an upstream stage's artifact: its manifest must
    /// exist, name that stage, and match the file's digest.
    Upstream(Stage),
    /// A path given explicitly: checked against a sibling manifest when
    /// one exists.
    Explicit,
    /// User data (roster, corpus, paintings): must exist; digested only.
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Input {
    pub path: PathBuf,
    pub kind: InputKind,
}

impl Input {
    pub fn upstream(path: PathBuf, stage: Stage) -> Self {
        Self { path, kind: InputKind::Upstream(stage) }
    }

    pub fn explicit(path: PathBuf) -> Self {
        Self { path, kind: InputKind::Explicit }
    }

    pub fn external(path: PathBuf) -> Self {
        Self { path, kind: InputKind::External }
    }

    /// `Upstream` unless the path was set explicitly.
    pub fn from_stage(explicit: &Option<PathBuf>, default: PathBuf, stage: Stage) -> Self {
        match explicit {
            Some(p) => Self::explicit(p.clone()),
            None => Self::upstream(default, stage),
        }
    }
}

/// Problems that make `input` stale; external inputs that do not exist are
/// a validation error instead.
fn check_input(input: &Input) -> Result<Vec<String>, PipelineError> {
    let path = &input.path;
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    match &input.kind {
        InputKind::External => {
            if path.exists() {
                Ok(Vec::new())
            } else {
                Err(PipelineError::Validation(format!("{} does not exist", path.display())))
            }
        }
        InputKind::Explicit if !path.exists() => {
            Err(PipelineError::Validation(format!("{} does not exist", path.display())))
        }
        InputKind::Explicit if !dir.join(MANIFEST_FILE).exists() => Ok(Vec::new()),
        kind => {
            if !path.exists() {
                let hint = match kind {
                    InputKind::Upstream(s) => format!(" (run {s} first)"),
                    _ => String::new(),
                };
                return Ok(vec![format!("{} is missing{hint}", path.display())]);
            }
            let manifest = match StageManifest::load(dir) {
                Ok(m) => m,
                Err(_) => return Ok(vec![format!("{} has no readable {MANIFEST_FILE}", dir.display())]),
            };
            let mut problems = Vec::new();
            if let InputKind::Upstream(s) = kind {
                if manifest.stage != *s {
                    problems.push(format!("{} was written by {}, expected {s}", dir.display(), manifest.stage));
                }
            }
            match manifest.outputs.iter().find(|o| o.path == name) {
                None => {
                    problems.push(format!("{} is not listed in {}", path.display(), dir.join(MANIFEST_FILE).display()))
                }
                Some(o) => {
                    let d = digest_path(path).map_err(|e| PipelineError::io(path, e))?;
                    if d != o.sha256 {
                        problems.push(format!("{} changed since {} wrote it", path.display(), manifest.stage));
                    }
                }
            }
            Ok(problems)
        }
    }
}

/// What a stage body hands back to the runner.
#[derive(Debug, Clone)]
pub struct StageOutput {
    /// File names inside the stage directory, digested into the manifest.
    pub outputs: Vec<String>,
    pub counts: Counts,
    pub details: serde_json::Value,
}

/// Runs one stage: checks inputs, executes, and writes the manifest
/// atomically into the stage directory.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig, force: bool) -> Result<StageManifest, PipelineError> {
    cfg.validate()?;
    let inputs = stages::inputs(stage, cfg)?;
    let mut stale = Vec::new();
    for input in &inputs {
        stale.extend(check_input(input)?);
    }
    if !stale.is_empty() && !force {
        return Err(PipelineError::StaleInput { stage, problems: stale });
    }
    for p in &stale {
        log::warn!("{stage}: forced past stale input: {p}");
    }

    let dir = cfg.stage_dir(stage);
    fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        fs::remove_file(&manifest_path).map_err(|e| PipelineError::io(&manifest_path, e))?;
    }
    let started_at = Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true);
    let clock = Instant::now();
    log::info!("{stage}: running into {}", dir.display());
    let out = stages::execute(stage, cfg, &dir)?;

    let mut input_digests = Vec::with_capacity(inputs.len());
    for i in &inputs {
        if !i.path.exists() {
            continue;
        }
        let sha256 = digest_path(&i.path).map_err(|e| PipelineError::io(&i.path, e))?;
        input_digests.push(FileDigest { path: i.path.display().to_string(), sha256 });
    }
    let mut output_digests = Vec::with_capacity(out.outputs.len());
    for name in &out.outputs {
        let p = dir.join(name);
        let sha256 = digest_path(&p).map_err(|e| PipelineError::io(&p, e))?;
        output_digests.push(FileDigest { path: name.clone(), sha256 });
    }
    let manifest = StageManifest {
        stage,
        tool_version: TOOL_VERSION.to_string(),
        format_versions: FormatVersions::current(),
        started_at,
        wall_clock_secs: clock.elapsed().as_secs_f64(),
        inputs: input_digests,
        outputs: output_digests,
        counts: out.counts,
        forced: force && !stale.is_empty(),
        stale_inputs: stale,
        details: out.details,
    };
    write_json(&manifest_path, &manifest).map_err(|e| PipelineError::io(&manifest_path, e))?;
    log::info!(
        "{stage}: {} in, {} out, {} errored ({:.2}s)",
        manifest.counts.records_in,
        manifest.counts.records_out,
        manifest.counts.records_errored,
        manifest.wall_clock_secs
    );
    Ok(manifest)
}

/// Stages a full run executes, in order. `features` runs only when the
/// config asks for stand-in features.
pub fn planned_stages(cfg: &PipelineConfig) -> Vec<Stage> {
    Stage::ALL.into_iter().filter(|&s| s != Stage::Features || cfg.features.synthetic).collect()
}

/// Runs every planned stage in order, stopping at the first failure.
pub fn run_all(cfg: &PipelineConfig, force: bool) -> Result<Vec<StageManifest>, PipelineError> {
    cfg.validate_paths()?;
    planned_stages(cfg).into_iter().map(|s| run_stage(s, cfg, force)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("nope".parse::<Stage>().is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(PipelineError::Validation("x".into()).exit_code(), 1);
        assert_eq!(PipelineError::stage(Stage::Train, "boom").exit_code(), 2);
        assert_eq!(PipelineError::io(Path::new("x"), io::Error::other("e")).exit_code(), 3);
    }

    #[test]
    fn directory_digest_tracks_contents() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.md"), "one").unwrap();
        let d1 = digest_path(dir.path()).unwrap();
        assert_eq!(d1, digest_path(dir.path()).unwrap());
        fs::write(dir.path().join("a.md"), "two").unwrap();
        assert_ne!(d1, digest_path(dir.path()).unwrap());
    }

    #[test]
    fn upstream_checks() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("works.jsonl");
        let input = Input::upstream(f.clone(), Stage::Harvest);
        assert_eq!(check_input(&input).unwrap().len(), 1);
        fs::write(&f, "{}\n").unwrap();
        assert_eq!(check_input(&input).unwrap().len(), 1);
        let m = StageManifest {
            stage: Stage::Harvest,
            tool_version: TOOL_VERSION.into(),
            format_versions: FormatVersions::current(),
            started_at: String::new(),
            wall_clock_secs: 0.0,
            inputs: vec![],
            outputs: vec![FileDigest { path: "works.jsonl".into(), sha256: digest_path(&f).unwrap() }],
            counts: Counts::default(),
            forced: false,
            stale_inputs: vec![],
            details: serde_json::Value::Null,
        };
        write_json(&dir.path().join(MANIFEST_FILE), &m).unwrap();
        assert!(check_input(&input).unwrap().is_empty());
        assert!(m.verify_outputs(dir.path()).is_empty());
        fs::write(&f, "{\"x\":1}\n").unwrap();
        assert_eq!(check_input(&input).unwrap().len(), 1);
        assert_eq!(m.verify_outputs(dir.path()).len(), 1);
        assert_eq!(check_input(&Input::upstream(f.clone(), Stage::Extract)).unwrap().len(), 2);
        assert!(matches!(check_input(&Input::external(dir.path().join("nope"))), Err(PipelineError::Validation(_))));
    }
}
