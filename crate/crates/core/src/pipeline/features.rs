//! Stand-in encoder features for fixture runs, used when no exported CLIP
//! features are available. They exist to exercise the train and eval
//! stages; they say nothing about real model quality.
//!
//! Text features are bag-of-words hash embeddings (the sum of per-token
//! test-provider vectors, normalized), so texts sharing words get similar
//! features. A painting's image feature is a fixed random linear map of the
//! text feature of its rendered query plus a little per-painting noise.

use std::collections::HashMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::align::{render_query, AlignedPair, PaintingRecord};
use crate::embedding::{EmbeddingMatrix, EmbeddingProvider, HashProvider};
use crate::extract::ContextUnit;
use crate::lora::{HeadKind, ProjectionHead};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureDims {
    pub d_img: usize,
    pub d_txt: usize,
    pub d_embed: usize,
}

#[derive(Debug, Clone)]
pub struct FeatureSet {
    /// Keyed by painting qid.
    pub img: EmbeddingMatrix,
    /// Label-text features keyed by painting qid.
    pub txt: EmbeddingMatrix,
    /// Window-text features keyed by context id.
    pub ctx: EmbeddingMatrix,
    pub head_img: ProjectionHead,
    pub head_txt: ProjectionHead,
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
}

pub struct BagOfWords {
    hash: HashProvider,
    cache: HashMap<String, Vec<f32>>,
}

impl BagOfWords {
    pub fn new(dim: usize) -> Self {
        Self { hash: HashProvider::new(dim), cache: HashMap::new() }
    }

    pub fn encode(&mut self, text: &str) -> Vec<f32> {
        let dim = self.hash.dim();
        let mut acc = vec![0.0f64; dim];
        for t in tokens(text) {
            let v = self.cache.entry(t).or_insert_with_key(|t| self.hash.embed_text(t));
            for (a, &x) in acc.iter_mut().zip(v.iter()) {
                *a += f64::from(x);
            }
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // empty text still needs a usable feature
            return self.hash.embed_text(text);
        }
        acc.iter().map(|&x| (x / norm) as f32).collect()
    }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize), std: f64) -> Array2<f32> {
    Array2::from_shape_simple_fn(shape, || {
        let v: f64 = StandardNormal.sample(rng);
        (std * v) as f32
    })
}

fn seed_for(seed: u64, key: &str) -> u64 {
    let d = Sha256::digest(format!("{seed}:{key}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn synthesize(
    paintings: &[PaintingRecord],
    pairs: &[AlignedPair],
    contexts: &[ContextUnit],
    dims: FeatureDims,
    seed: u64,
) -> FeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = gaussian(&mut rng, (dims.d_img, dims.d_txt), 1.0 / (dims.d_txt as f64).sqrt());
    let w_img = gaussian(&mut rng, (dims.d_embed, dims.d_img), 1.0 / (dims.d_img as f64).sqrt());
    let w_txt = gaussian(&mut rng, (dims.d_embed, dims.d_txt), 1.0 / (dims.d_txt as f64).sqrt());
    let mut bow = BagOfWords::new(dims.d_txt);

    let mut seen = std::collections::HashSet::new();
    let mut img_rows = Vec::new();
    for p in paintings {
        if !seen.insert(p.qid.as_str()) {
            continue;
        }
        let t = bow.encode(&render_query(p));
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed_for(seed, &p.qid));
        let row: Vec<f32> = map
            .rows()
            .into_iter()
            .map(|r| {
                let n: f64 = StandardNormal.sample(&mut noise_rng);
                r.iter().zip(&t).map(|(&a, &b)| a * b).sum::<f32>() + 0.05 * n as f32
            })
            .collect();
        img_rows.push((p.qid.clone(), row));
    }
    img_rows.sort_by(|a, b| a.0.cmp(&b.0));
    let txt_rows: Vec<(String, Vec<f32>)> = pairs.iter().map(|p| (p.qid.clone(), bow.encode(&p.label_text))).collect();
    let ctx_rows: Vec<(String, Vec<f32>)> = contexts.iter().map(|c| (c.id(), bow.encode(&c.window_text))).collect();

    FeatureSet {
        img: EmbeddingMatrix::from_rows(dims.d_img, img_rows).expect("qids deduplicated"),
        txt: EmbeddingMatrix::from_rows(dims.d_txt, txt_rows).expect("aligned qids are unique"),
        ctx: EmbeddingMatrix::from_rows(dims.d_txt, ctx_rows).expect("context ids are unique"),
        head_img: ProjectionHead::new(HeadKind::Visual, w_img),
        head_txt: ProjectionHead::new(HeadKind::Text, w_txt),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::cosine;

    #[test]
    fn shared_words_give_similar_features() {
        let mut bow = BagOfWords::new(32);
        let a = bow.encode("The Night Watch by Rembrandt");
        let b = bow.encode("Rembrandt painted The Night Watch");
        let c = bow.encode("frescoes in a Paduan chapel");
        assert!(cosine(&a, &b).unwrap() > cosine(&a, &c).unwrap());
        assert_eq!(bow.encode("Night, watch!"), bow.encode("night watch"));
    }

    #[test]
    fn synthesis_is_deterministic() {
        let p = PaintingRecord {
            qid: "Q1".into(),
            title: "T".into(),
            creator_name: "C".into(),
            creator_qid: String::new(),
            year: None,
            depicts: vec![],
            movement: None,
            link_count: 0,
            image_ref: String::new(),
        };
        let dims = FeatureDims { d_img: 8, d_txt: 6, d_embed: 4 };
        let a = synthesize(std::slice::from_ref(&p), &[], &[], dims, 3);
        let b = synthesize(std::slice::from_ref(&p), &[], &[], dims, 3);
        assert_eq!(a.img, b.img);
        assert_eq!(a.head_txt, b.head_txt);
        assert_eq!(a.img.dim(), 8);
        assert_eq!(a.head_img.d_in(), 8);
        assert_eq!(a.head_txt.d_out(), 4);
    }
}
