//! Stage bodies and the inputs each one reads.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{synthesize, FeatureDims, Input, PipelineConfig, PipelineError, Stage, StageOutput};
use crate::align::{align_all, AlignOptions, AlignedPair, ContextIndex, PaintingRecord};
use crate::discovery::{
    harvest, load_roster, FixtureClient, HarvestOptions, LiveClient, TopicFilter, WorkRecord, WorksClient,
    API_BASE_ENV, DEFAULT_API_BASE,
};
use crate::embedding::{
    embed_contexts, load_matrix, save_matrix, EmbeddingMatrix, FormatError, ProviderError, ProviderSpec,
};
use crate::eval::{emit_plot_data, evaluate, score_matrix, EmitError, EvalQuery, EvalReport};
use crate::extract::{extract_document, ContextUnit, DocumentText, ExtractOptions, Rejection, RuleSegmenter};
use crate::io_util::{read_jsonl, write_json, write_jsonl, JsonlError};
use crate::lora::{
    load_adapter, project_matrix, save_adapter, train, AdapterFile, FeatureStore, HeadKind, LoraAdapter, ProjectionHead,
};

pub const WORKS: &str = "works.jsonl";
pub const HARVEST_REPORT: &str = "harvest_manifest.json";
pub const CONTEXTS: &str = "contexts.jsonl";
pub const REJECTIONS: &str = "rejections.jsonl";
pub const CONTEXT_VECTORS: &str = "contexts.emb";
pub const PAIRS: &str = "aligned_pairs.jsonl";
pub const UNMATCHED: &str = "unmatched.jsonl";
pub const QUERY_VECTORS: &str = "queries.emb";
pub const IMG_FEATS: &str = "img.emb";
pub const TXT_FEATS: &str = "txt.emb";
pub const CTX_FEATS: &str = "ctx.emb";
pub const IMG_PROJ: &str = "img_proj.emb";
pub const TXT_PROJ: &str = "txt_proj.emb";
pub const VISUAL_ADAPTER: &str = "visual.lora";
pub const TEXT_ADAPTER: &str = "text.lora";
pub const LOSS_HISTORY: &str = "loss_history.json";
pub const BASELINE_SCORES: &str = "baseline_scores.emb";
pub const ADAPTED_SCORES: &str = "adapted_scores.emb";
pub const PR_CSV: &str = "pr.csv";
pub const REPORT: &str = "report.json";

fn required(p: Option<&PathBuf>, what: &str) -> Result<PathBuf, PipelineError> {
    p.cloned().ok_or_else(|| PipelineError::Validation(format!("{what} is not set")))
}

pub(super) fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    read_jsonl(path).map_err(|e| match e {
        JsonlError::Io { source, .. } => PipelineError::io(path, source),
        e @ JsonlError::Parse { .. } => PipelineError::Validation(e.to_string()),
    })
}

pub(super) fn load_emb(path: &Path) -> Result<EmbeddingMatrix, PipelineError> {
    load_matrix(path).map_err(|e| match e {
        FormatError::Io(source) => PipelineError::io(path, source),
        e => PipelineError::Validation(format!("{}: {e}", path.display())),
    })
}

fn save_emb(m: &EmbeddingMatrix, path: &Path) -> Result<(), PipelineError> {
    save_matrix(m, path).map_err(|e| PipelineError::io(path, e))
}

pub(super) fn load_head(kind: HeadKind, path: &Path) -> Result<ProjectionHead, PipelineError> {
    Ok(ProjectionHead::from_matrix(kind, &load_emb(path)?))
}

pub(super) fn load_lora(kind: HeadKind, path: &Path) -> Result<LoraAdapter, PipelineError> {
    let file = load_adapter(path).map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))?;
    if file.head != kind {
        return Err(PipelineError::Validation(format!(
            "{} holds a {} adapter, expected {}",
            path.display(),
            file.head.name(),
            kind.name()
        )));
    }
    Ok(file.adapter)
}

pub(super) fn provider_spec(s: &str) -> Result<ProviderSpec, PipelineError> {
    s.parse().map_err(|e: ProviderError| PipelineError::Validation(e.to_string()))
}

fn provider_input(spec: &ProviderSpec) -> Option<Input> {
    match spec {
        ProviderSpec::File(p) => Some(Input::external(p.clone())),
        ProviderSpec::Test { .. } => None,
    }
}

/// Resolved input locations. Explicit config keys win over the default
/// locations inside upstream stage directories.
pub(super) struct Paths<'a> {
    cfg: &'a PipelineConfig,
}

impl<'a> Paths<'a> {
    pub(super) fn new(cfg: &'a PipelineConfig) -> Self {
        Self { cfg }
    }

    fn upstream(&self, explicit: &Option<PathBuf>, stage: Stage, name: &str) -> Input {
        Input::from_stage(explicit, self.cfg.stage_dir(stage).join(name), stage)
    }

    pub(super) fn roster(&self) -> Result<PathBuf, PipelineError> {
        required(self.cfg.extract.roster.as_ref().or(self.cfg.harvest.roster.as_ref()), "roster")
    }

    pub(super) fn paintings(&self) -> Result<PathBuf, PipelineError> {
        required(self.cfg.features.paintings.as_ref().or(self.cfg.align.paintings.as_ref()), "paintings")
    }

    pub(super) fn align_paintings(&self) -> Result<PathBuf, PipelineError> {
        required(self.cfg.align.paintings.as_ref(), "align.paintings")
    }

    pub(super) fn works(&self) -> Input {
        self.upstream(&self.cfg.extract.works, Stage::Harvest, WORKS)
    }

    pub(super) fn contexts(&self, explicit: &Option<PathBuf>) -> Input {
        self.upstream(explicit, Stage::Extract, CONTEXTS)
    }

    pub(super) fn context_vectors(&self) -> Input {
        self.upstream(&self.cfg.align.vectors, Stage::Embed, CONTEXT_VECTORS)
    }

    pub(super) fn pairs(&self, explicit: &Option<PathBuf>) -> Input {
        self.upstream(explicit, Stage::Align, PAIRS)
    }

    /// A feature file: the explicit key, else the features stage output
    /// when stand-in features are enabled.
    pub(super) fn feature(&self, explicit: &Option<PathBuf>, name: &str, key: &str) -> Result<Input, PipelineError> {
        if explicit.is_none() && !self.cfg.features.synthetic {
            return Err(PipelineError::Validation(format!(
                "{key} is not set (point it at exported encoder features or enable features.synthetic)"
            )));
        }
        Ok(self.upstream(explicit, Stage::Features, name))
    }

    pub(super) fn adapters(&self) -> (Input, Input) {
        match &self.cfg.eval.adapters {
            Some(dir) => (Input::explicit(dir.join(VISUAL_ADAPTER)), Input::explicit(dir.join(TEXT_ADAPTER))),
            None => {
                let dir = self.cfg.stage_dir(Stage::Train);
                (
                    Input::upstream(dir.join(VISUAL_ADAPTER), Stage::Train),
                    Input::upstream(dir.join(TEXT_ADAPTER), Stage::Train),
                )
            }
        }
    }

    pub(super) fn train_features(&self) -> Result<[Input; 4], PipelineError> {
        let t = &self.cfg.train;
        Ok([
            self.feature(&t.img_feats, IMG_FEATS, "train.img_feats")?,
            self.feature(&t.txt_feats, TXT_FEATS, "train.txt_feats")?,
            self.feature(&t.img_proj, IMG_PROJ, "train.img_proj")?,
            self.feature(&t.txt_proj, TXT_PROJ, "train.txt_proj")?,
        ])
    }

    pub(super) fn eval_features(&self) -> Result<[Input; 4], PipelineError> {
        let e = &self.cfg.eval;
        Ok([
            self.feature(&e.img_feats, IMG_FEATS, "eval.img_feats")?,
            self.feature(&e.ctx_feats, CTX_FEATS, "eval.ctx_feats")?,
            self.feature(&e.img_proj, IMG_PROJ, "eval.img_proj")?,
            self.feature(&e.txt_proj, TXT_PROJ, "eval.txt_proj")?,
        ])
    }
}

/// Everything `stage` reads, in a fixed order.
pub(super) fn inputs(stage: Stage, cfg: &PipelineConfig) -> Result<Vec<Input>, PipelineError> {
    let paths = Paths::new(cfg);
    let mut out = Vec::new();
    match stage {
        Stage::Harvest => {
            out.push(Input::external(required(cfg.harvest.roster.as_ref(), "harvest.roster")?));
            out.push(Input::external(required(cfg.harvest.topics.as_ref(), "harvest.topics")?));
            if let Some(f) = &cfg.harvest.fixture {
                out.push(Input::external(f.clone()));
            }
        }
        Stage::Extract => {
            out.push(paths.works());
            out.push(Input::external(paths.roster()?));
            out.push(Input::external(required(cfg.extract.corpus.as_ref(), "extract.corpus")?));
        }
        Stage::Embed => {
            out.push(paths.contexts(&cfg.embed.contexts));
            out.extend(provider_input(&provider_spec(&cfg.embed.provider)?));
        }
        Stage::Align => {
            out.push(Input::external(paths.align_paintings()?));
            out.push(paths.contexts(&cfg.align.contexts));
            out.push(paths.context_vectors());
            out.extend(provider_input(&provider_spec(cfg.align_provider())?));
        }
        Stage::Features => {
            out.push(Input::external(paths.paintings()?));
            out.push(paths.pairs(&cfg.features.pairs));
            out.push(paths.contexts(&cfg.features.contexts));
        }
        Stage::Train => {
            out.push(paths.pairs(&cfg.train.pairs));
            out.extend(paths.train_features()?);
        }
        Stage::Eval => {
            out.push(Input::external(required(cfg.eval.queries.as_ref(), "eval.queries")?));
            out.extend(paths.eval_features()?);
            let (v, t) = paths.adapters();
            out.push(v);
            out.push(t);
        }
    }
    Ok(out)
}

pub(super) fn execute(stage: Stage, cfg: &PipelineConfig, dir: &Path) -> Result<StageOutput, PipelineError> {
    match stage {
        Stage::Harvest => run_harvest(cfg, dir),
        Stage::Extract => run_extract(cfg, dir),
        Stage::Embed => run_embed(cfg, dir),
        Stage::Align => run_align(cfg, dir),
        Stage::Features => run_features(cfg, dir),
        Stage::Train => run_train(cfg, dir),
        Stage::Eval => run_eval(cfg, dir),
    }
}

fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<(), PipelineError> {
    write_jsonl(path, records).map_err(|e| PipelineError::io(path, e))
}

fn write_pretty<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    write_json(path, value).map_err(|e| PipelineError::io(path, e))
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// API base: config (or flag), then the environment, then the public API.
pub fn resolve_api_base(configured: Option<&str>) -> String {
    configured
        .map(str::to_string)
        .or_else(|| std::env::var(API_BASE_ENV).ok().filter(|s| !s.is_empty()))
        .unwrap_or_else(|| DEFAULT_API_BASE.to_string())
}

fn run_harvest(cfg: &PipelineConfig, dir: &Path) -> Result<StageOutput, PipelineError> {
    let h = &cfg.harvest;
    let roster_path = required(h.roster.as_ref(), "harvest.roster")?;
    let topics_path = required(h.topics.as_ref(), "harvest.topics")?;
    let validation = |e: crate::discovery::DiscoveryError| PipelineError::Validation(e.to_string());
    let roster = load_roster(&roster_path).map_err(validation)?;
    let filter = TopicFilter::load(&topics_path, h.rho).map_err(validation)?;
    let client: Box<dyn WorksClient> = match &h.fixture {
        Some(d) => Box::new(FixtureClient::new(d.clone())),
        None => {
            let base = resolve_api_base(h.api_base.as_deref());
            Box::new(LiveClient::new(base).map_err(|e| PipelineError::stage(Stage::Harvest, e))?)
        }
    };
    let opts = HarvestOptions {
        per_page: h.per_page,
        max_pages: h.max_pages,
        max_attempts: h.max_attempts,
        base_delay: Duration::from_millis(h.base_delay_ms),
        ..HarvestOptions::default()
    };
    let out = harvest(&roster, &filter, client.as_ref(), &opts).map_err(validation)?;
    let failed = out.manifest.failed_artists();
    if failed == roster.len() && !roster.is_empty() {
        let errors: Vec<String> = out
            .manifest
            .artists
            .iter()
            .map(|a| format!("{}: {}", a.artist_id, a.error.as_deref().unwrap_or("?")))
            .collect();
        return Err(PipelineError::stage(Stage::Harvest, format!("every artist failed ({})", errors.join("; "))));
    }
    write_records(&dir.join(WORKS), &out.works)?;
    write_pretty(&dir.join(HARVEST_REPORT), &out.manifest)?;
    Ok(StageOutput {
        outputs: names(&[WORKS]),
        counts: super::Counts { records_in: roster.len(), records_out: roster.len() - failed, records_errored: failed },
        details: json!({
            "client": client.base(),
            "works": out.works.len(),
            "cross_artist_duplicates": out.manifest.cross_artist_duplicates.len(),
            "report": HARVEST_REPORT,
        }),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum DocumentRejection {
    MissingDocument,
    InvalidWorkId,
    TooLarge { byte_size: u64, max_bytes: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionRecord {
    pub work_id: String,
    #[serde(flatten)]
    pub rejection: DocumentRejection,
}

fn document_path(corpus: &Path, work_id: &str) -> Option<PathBuf> {
    ["md", "txt"].iter().map(|ext| corpus.join(format!("{work_id}.{ext}"))).find(|p| p.is_file())
}

fn run_extract(cfg: &PipelineConfig, dir: &Path) -> Result<StageOutput, PipelineError> {
    let paths = Paths::new(cfg);
    let works: Vec<WorkRecord> = read_records(&paths.works().path)?;
    let roster = load_roster(&paths.roster()?).map_err(|e| PipelineError::Validation(e.to_string()))?;
    let corpus = required(cfg.extract.corpus.as_ref(), "extract.corpus")?;
    let names_by_id: HashMap<&str, &str> = roster.iter().map(|a| (a.artist_id.as_str(), a.name.as_str())).collect();

    // a work harvested for several artists is extracted once and carries
    // all of their names
    let mut artists_of: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for w in &works {
        let entry = artists_of.entry(w.work_id.as_str()).or_default();
        let name = names_by_id.get(w.artist_id.as_str()).ok_or_else(|| {
            PipelineError::Validation(format!(
                "work {} names artist {} which is not in the roster",
                w.work_id, w.artist_id
            ))
        })?;
        if !entry.iter().any(|n| n == name) {
            entry.push(name.to_string());
        }
    }

    let segmenter = RuleSegmenter::shipped();
    let opts = ExtractOptions { max_bytes: cfg.extract.max_bytes, dedup: cfg.extract.dedup };
    let mut units: Vec<ContextUnit> = Vec::new();
    let mut rejected = Vec::new();
    let mut replacements = 0usize;
    for (work_id, artists) in &artists_of {
        let reject = |rejection| RejectionRecord { work_id: work_id.to_string(), rejection };
        if work_id.is_empty() || work_id.contains(['/', '\\']) || work_id.starts_with('.') {
            rejected.push(reject(DocumentRejection::InvalidWorkId));
            continue;
        }
        let Some(path) = document_path(&corpus, work_id) else {
            rejected.push(reject(DocumentRejection::MissingDocument));
            continue;
        };
        let doc = DocumentText::read(*work_id, &path).map_err(|e| PipelineError::io(&path, e))?;
        replacements += doc.replacements;
        match extract_document(&doc, &segmenter, &opts) {
            Ok(found) => units.extend(found.into_iter().map(|mut u| {
                u.artists = artists.clone();
                u
            })),
            Err(Rejection::TooLarge { byte_size, max_bytes }) => {
                rejected.push(reject(DocumentRejection::TooLarge { byte_size, max_bytes }))
            }
        }
    }
    write_records(&dir.join(CONTEXTS), &units)?;
    write_records(&dir.join(REJECTIONS), &rejected)?;
    let n = artists_of.len();
    Ok(StageOutput {
        outputs: names(&[CONTEXTS, REJECTIONS]),
        counts: super::Counts { records_in: n, records_out: n - rejected.len(), records_errored: rejected.len() },
        details: json!({
            "context_units": units.len(),
            "max_bytes": opts.max_bytes,
            "dedup": opts.dedup,
            "utf8_replacements": replacements,
            "abbreviation_list_version": segmenter.abbreviation_list_version(),
        }),
    })
}

fn run_embed(cfg: &PipelineConfig, dir: &Path) -> Result<StageOutput, PipelineError> {
    let contexts: Vec<ContextUnit> = read_records(&Paths::new(cfg).contexts(&cfg.embed.contexts).path)?;
    let spec = provider_spec(&cfg.embed.provider)?;
    let provider = spec.open().map_err(|e| PipelineError::Validation(e.to_string()))?;
    let m = embed_contexts(provider.as_ref(), &contexts, cfg.embed.batch_size)
        .map_err(|e| PipelineError::stage(Stage::Embed, e))?;
    save_emb(&m, &dir.join(CONTEXT_VECTORS))?;
    Ok(StageOutput {
        outputs: names(&[CONTEXT_VECTORS]),
        counts: super::Counts { records_in: contexts.len(), records_out: m.rows(), records_errored: 0 },
        details: json!({
            "provider": spec.to_string(),
            "model": provider.model_name(),
            "dim": provider.dim(),
            "batch_size": cfg.embed.batch_size,
        }),
    })
}

fn run_align(cfg: &PipelineConfig, dir: &Path) -> Result<StageOutput, PipelineError> {
    let paths = Paths::new(cfg);
    let paintings: Vec<PaintingRecord> = read_records(&paths.align_paintings()?)?;
    let contexts: Vec<ContextUnit> = read_records(&paths.contexts(&cfg.align.contexts).path)?;
    let vectors = load_emb(&paths.context_vectors().path)?;
    let spec = provider_spec(cfg.align_provider())?;
    let provider = spec.open().map_err(|e| PipelineError::Validation(e.to_string()))?;
    if provider.dim() != vectors.dim() {
        return Err(PipelineError::Validation(format!(
            "provider {spec} has dim {} but context vectors have dim {}",
            provider.dim(),
            vectors.dim()
        )));
    }
    let index = ContextIndex::new(&contexts, &vectors).map_err(|e| PipelineError::Validation(e.to_string()))?;
    let opts = AlignOptions { min_sim: cfg.align.min_sim };
    let run = align_all(&paintings, &index, provider.as_ref(), &opts).map_err(|e| match e {
        e @ crate::align::AlignError::InvalidRecord { .. } => PipelineError::Validation(e.to_string()),
        e => PipelineError::stage(Stage::Align, e),
    })?;
    write_records(&dir.join(PAIRS), &run.pairs)?;
    write_records(&dir.join(UNMATCHED), &run.unmatched)?;
    save_emb(&run.queries, &dir.join(QUERY_VECTORS))?;
    let mut reasons: BTreeMap<String, usize> = BTreeMap::new();
    for u in &run.unmatched {
        let key = serde_json::to_value(u.reason).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        *reasons.entry(key).or_default() += 1;
    }
    Ok(StageOutput {
        outputs: names(&[PAIRS, UNMATCHED, QUERY_VECTORS]),
        counts: super::Counts {
            records_in: paintings.len(),
            records_out: run.pairs.len(),
            records_errored: run.unmatched.len(),
        },
        details: json!({
            "provider": spec.to_string(),
            "model": provider.model_name(),
            "min_sim": cfg.align.min_sim,
            "artists_with_contexts": index.artist_count(),
            "unmatched_by_reason": reasons,
        }),
    })
}

fn run_features(cfg: &PipelineConfig, dir: &Path) -> Result<StageOutput, PipelineError> {
    let paths = Paths::new(cfg);
    let paintings: Vec<PaintingRecord> = read_records(&paths.paintings()?)?;
    let pairs: Vec<AlignedPair> = read_records(&paths.pairs(&cfg.features.pairs).path)?;
    let contexts: Vec<ContextUnit> = read_records(&paths.contexts(&cfg.features.contexts).path)?;
    let f = &cfg.features;
    if f.d_img == 0 || f.d_txt == 0 || f.d_embed == 0 {
        return Err(PipelineError::Validation("feature dims must be positive".into()));
    }
    let set = synthesize(
        &paintings,
        &pairs,
        &contexts,
        FeatureDims { d_img: f.d_img, d_txt: f.d_txt, d_embed: f.d_embed },
        cfg.run.seed,
    );
    save_emb(&set.img, &dir.join(IMG_FEATS))?;
    save_emb(&set.txt, &dir.join(TXT_FEATS))?;
    save_emb(&set.ctx, &dir.join(CTX_FEATS))?;
    save_emb(&set.head_img.to_matrix(), &dir.join(IMG_PROJ))?;
    save_emb(&set.head_txt.to_matrix(), &dir.join(TXT_PROJ))?;
    Ok(StageOutput {
        outputs: names(&[IMG_FEATS, TXT_FEATS, CTX_FEATS, IMG_PROJ, TXT_PROJ]),
        counts: super::Counts { records_in: set.img.rows(), records_out: set.img.rows(), records_errored: 0 },
        details: json!({
            "kind": "stand-in",
            "d_img": f.d_img,
            "d_txt": f.d_txt,
            "d_embed": f.d_embed,
            "seed": cfg.run.seed,
            "label_texts": set.txt.rows(),
            "contexts": set.ctx.rows(),
        }),
    })
}

fn run_train(cfg: &PipelineConfig, dir: &Path) -> Result<StageOutput, PipelineError> {
    let paths = Paths::new(cfg);
    let pairs: Vec<AlignedPair> = read_records(&paths.pairs(&cfg.train.pairs).path)?;
    let [img_in, txt_in, hi_in, ht_in] = paths.train_features()?;
    let img = load_emb(&img_in.path)?;
    let txt = load_emb(&txt_in.path)?;
    let head_img = load_head(HeadKind::Visual, &hi_in.path)?;
    let head_txt = load_head(HeadKind::Text, &ht_in.path)?;

    let usable: Vec<&str> = pairs
        .iter()
        .map(|p| p.qid.as_str())
        .filter(|q| img.position(q).is_some() && txt.position(q).is_some())
        .collect();
    let missing = pairs.len() - usable.len();
    if missing > 0 {
        log::warn!("train: {missing} aligned pairs have no features and are skipped");
    }
    let store = FeatureStore::from_matrices(&usable, &img, &txt).map_err(|e| PipelineError::stage(Stage::Train, e))?;
    let config = cfg.train_config();
    let outcome = train(&store, (&head_img, &head_txt), &config).map_err(|e| PipelineError::stage(Stage::Train, e))?;
    let digest = config.digest();
    for (file, head, adapter) in
        [(VISUAL_ADAPTER, HeadKind::Visual, &outcome.adapter_img), (TEXT_ADAPTER, HeadKind::Text, &outcome.adapter_txt)]
    {
        let path = dir.join(file);
        save_adapter(&AdapterFile { head, adapter: adapter.clone(), config_digest: digest }, &path)
            .map_err(|e| PipelineError::io(&path, e))?;
    }
    write_pretty(&dir.join(LOSS_HISTORY), &outcome.loss_history)?;
    Ok(StageOutput {
        outputs: names(&[VISUAL_ADAPTER, TEXT_ADAPTER, LOSS_HISTORY]),
        counts: super::Counts { records_in: pairs.len(), records_out: usable.len(), records_errored: missing },
        details: json!({
            "config": config,
            "config_digest": hex::encode(digest),
            "initial_loss": outcome.loss_history.first(),
            "final_loss": outcome.loss_history.last(),
        }),
    })
}

/// Scores for every query under the frozen heads and under the adapted
/// ones, as `(baseline, adapted)` score matrices.
pub fn score_queries(
    queries: &[EvalQuery],
    feats: (&EmbeddingMatrix, &EmbeddingMatrix),
    heads: (&ProjectionHead, &ProjectionHead),
    adapters: (&LoraAdapter, &LoraAdapter),
) -> Result<(EmbeddingMatrix, EmbeddingMatrix), String> {
    let qids: Vec<&str> = queries.iter().map(|q| q.qid.as_str()).collect();
    let mut cands: Vec<&str> = queries.iter().flat_map(|q| q.candidate_ids.iter().map(String::as_str)).collect();
    cands.sort_unstable();
    cands.dedup();
    let img = feats.0.select(&qids).map_err(|e| e.to_string())?;
    let ctx = feats.1.select(&cands).map_err(|e| e.to_string())?;
    let side = |ad: Option<(&LoraAdapter, &LoraAdapter)>| -> Result<EmbeddingMatrix, String> {
        let q = project_matrix(heads.0, ad.map(|a| a.0), &img).map_err(|e| e.to_string())?;
        let c = project_matrix(heads.1, ad.map(|a| a.1), &ctx).map_err(|e| e.to_string())?;
        score_matrix(queries, &q, &c).map_err(|e| e.to_string())
    };
    Ok((side(None)?, side(Some(adapters))?))
}

/// Writes `pr.csv` and `report.json` for scored queries.
pub fn write_eval_outputs(
    queries: &[EvalQuery],
    baseline: &EmbeddingMatrix,
    adapted: &EmbeddingMatrix,
    dir: &Path,
) -> Result<EvalReport, PipelineError> {
    let report = evaluate(queries, baseline, adapted).map_err(|e| PipelineError::Validation(e.to_string()))?;
    let csv = dir.join(PR_CSV);
    emit_plot_data(&report.baseline, &report.adapted, &csv).map_err(|e| match e {
        EmitError::Io(source) => PipelineError::io(&csv, source),
        e => PipelineError::stage(Stage::Eval, e),
    })?;
    write_pretty(&dir.join(REPORT), &report)?;
    Ok(report)
}

/// Evaluates precomputed score matrices (one row per query, one column per
/// candidate) and writes the PR plot data to `out_csv`.
pub fn eval_score_files(
    queries: &Path,
    baseline: &Path,
    adapted: &Path,
    out_csv: &Path,
) -> Result<EvalReport, PipelineError> {
    let queries: Vec<EvalQuery> = read_records(queries)?;
    let report = evaluate(&queries, &load_emb(baseline)?, &load_emb(adapted)?)
        .map_err(|e| PipelineError::Validation(e.to_string()))?;
    emit_plot_data(&report.baseline, &report.adapted, out_csv).map_err(|e| match e {
        EmitError::Io(source) => PipelineError::io(out_csv, source),
        e => PipelineError::stage(Stage::Eval, e),
    })?;
    Ok(report)
}

fn run_eval(cfg: &PipelineConfig, dir: &Path) -> Result<StageOutput, PipelineError> {
    let paths = Paths::new(cfg);
    let all: Vec<EvalQuery> = read_records(&required(cfg.eval.queries.as_ref(), "eval.queries")?)?;
    for q in &all {
        q.validate().map_err(|e| PipelineError::Validation(format!("query {}: {e}", q.qid)))?;
    }
    let [img_in, ctx_in, hi_in, ht_in] = paths.eval_features()?;
    let img = load_emb(&img_in.path)?;
    let ctx = load_emb(&ctx_in.path)?;
    let head_img = load_head(HeadKind::Visual, &hi_in.path)?;
    let head_txt = load_head(HeadKind::Text, &ht_in.path)?;
    let (v_in, t_in) = paths.adapters();
    let ad_img = load_lora(HeadKind::Visual, &v_in.path)?;
    let ad_txt = load_lora(HeadKind::Text, &t_in.path)?;

    let (queries, skipped): (Vec<EvalQuery>, Vec<EvalQuery>) = all
        .iter()
        .cloned()
        .partition(|q| img.position(&q.qid).is_some() && q.candidate_ids.iter().all(|c| ctx.position(c).is_some()));
    for q in &skipped {
        log::warn!("eval: query {} lacks features and is skipped", q.qid);
    }
    if queries.is_empty() {
        return Err(PipelineError::stage(Stage::Eval, "no query has features"));
    }
    let (baseline, adapted) = score_queries(&queries, (&img, &ctx), (&head_img, &head_txt), (&ad_img, &ad_txt))
        .map_err(|e| PipelineError::stage(Stage::Eval, e))?;
    save_emb(&baseline, &dir.join(BASELINE_SCORES))?;
    save_emb(&adapted, &dir.join(ADAPTED_SCORES))?;
    let report = write_eval_outputs(&queries, &baseline, &adapted, dir)?;
    Ok(StageOutput {
        outputs: names(&[BASELINE_SCORES, ADAPTED_SCORES, PR_CSV, REPORT]),
        counts: super::Counts { records_in: all.len(), records_out: queries.len(), records_errored: skipped.len() },
        details: json!({
            "map_baseline": report.map_baseline,
            "map_adapted": report.map_adapted,
            "skipped": skipped.iter().map(|q| q.qid.as_str()).collect::<Vec<_>>(),
        }),
    })
}
