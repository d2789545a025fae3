//! Top-k sentence retrieval for one painting over its creator's contexts.

use serde::{Deserialize, Serialize};

use super::stages::{load_emb, load_head, load_lora, provider_spec, read_records, Paths, TEXT_ADAPTER, VISUAL_ADAPTER};
use super::{PipelineConfig, PipelineError, Stage};
use crate::align::{render_query, ContextIndex, PaintingRecord};
use crate::embedding::{top_k, EmbeddingMatrix, TextItem};
use crate::extract::ContextUnit;
use crate::lora::{project_matrix, HeadKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrieveMode {
    /// Rendered query text against context vectors from the embed stage.
    Text,
    /// Image features against context text features through the
    /// projection heads, with or without the trained adapters.
    Clip { adapted: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedSentence {
    pub rank: usize,
    pub context_id: String,
    pub sentence: String,
    pub window_text: String,
    pub score: f64,
}

fn ranked(
    query: &[f32],
    units: &[&ContextUnit],
    vectors: &EmbeddingMatrix,
    k: usize,
) -> Result<Vec<RetrievedSentence>, PipelineError> {
    let hits = top_k(query, vectors, k.min(vectors.rows())).map_err(|e| PipelineError::Validation(e.to_string()))?;
    Ok(hits
        .into_iter()
        .enumerate()
        .map(|(i, (row, score))| RetrievedSentence {
            rank: i + 1,
            context_id: units[row].id(),
            sentence: units[row].sentence.clone(),
            window_text: units[row].window_text.clone(),
            score,
        })
        .collect())
}

/// The `k` best contexts for painting `qid`, best first. `k` is capped at
/// the number of contexts harvested for its creator.
pub fn retrieve_topk(
    cfg: &PipelineConfig,
    qid: &str,
    k: usize,
    mode: RetrieveMode,
) -> Result<Vec<RetrievedSentence>, PipelineError> {
    if k == 0 {
        return Err(PipelineError::Validation("k must be positive".into()));
    }
    let paths = Paths::new(cfg);
    let paintings: Vec<PaintingRecord> = read_records(&paths.align_paintings()?)?;
    let painting =
        paintings.iter().find(|p| p.qid == qid).ok_or_else(|| PipelineError::UnknownPainting(qid.to_string()))?;
    let contexts: Vec<ContextUnit> = read_records(&paths.contexts(&cfg.align.contexts).path)?;

    match mode {
        RetrieveMode::Text => {
            let vectors = load_emb(&paths.context_vectors().path)?;
            let index = ContextIndex::new(&contexts, &vectors).map_err(|e| PipelineError::Validation(e.to_string()))?;
            let Some(group) = index.for_artist(&painting.creator_name) else {
                return Ok(Vec::new());
            };
            let provider =
                provider_spec(cfg.align_provider())?.open().map_err(|e| PipelineError::Validation(e.to_string()))?;
            let text = render_query(painting);
            let mut rows = provider
                .embed(&[TextItem { id: &painting.qid, text: &text }])
                .map_err(|e| PipelineError::stage(Stage::Align, e))?;
            let q = rows.pop().ok_or_else(|| PipelineError::stage(Stage::Align, "provider returned no vector"))?;
            ranked(&q, &group.units, &group.vectors, k)
        }
        RetrieveMode::Clip { adapted } => {
            let [img_in, ctx_in, hi_in, ht_in] = paths.eval_features()?;
            let img = load_emb(&img_in.path)?;
            let ctx = load_emb(&ctx_in.path)?;
            let head_img = load_head(HeadKind::Visual, &hi_in.path)?;
            let head_txt = load_head(HeadKind::Text, &ht_in.path)?;
            let adapters = if adapted {
                let (v, t) = paths.adapters();
                debug_assert!(v.path.ends_with(VISUAL_ADAPTER) && t.path.ends_with(TEXT_ADAPTER));
                Some((load_lora(HeadKind::Visual, &v.path)?, load_lora(HeadKind::Text, &t.path)?))
            } else {
                None
            };
            let feat =
                img.select(&[qid]).map_err(|_| PipelineError::Validation(format!("no image features for {qid}")))?;
            let index = ContextIndex::new(&contexts, &ctx).map_err(|e| PipelineError::Validation(e.to_string()))?;
            let Some(group) = index.for_artist(&painting.creator_name) else {
                return Ok(Vec::new());
            };
            let stage_err = |e: crate::lora::LoraError| PipelineError::stage(Stage::Eval, e);
            let q = project_matrix(&head_img, adapters.as_ref().map(|a| &a.0), &feat).map_err(stage_err)?;
            let c = project_matrix(&head_txt, adapters.as_ref().map(|a| &a.1), &group.vectors).map_err(stage_err)?;
            ranked(q.row(0), &group.units, &c, k)
        }
    }
}
