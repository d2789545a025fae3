//! Synthetic paired features with a shared latent cluster structure, used
//! to exercise training end to end without real encoders.
//!
//! Each pair draws a latent `z = c_k + sigma_z * e` around one of `clusters`
//! centers. Image and text features are independent random linear maps of
//! `z` plus noise. The frozen heads are random too, so the baseline
//! embedding spaces of the two modalities are unrelated and the adapters
//! have something to learn.

use ndarray::{s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embedding::{cosine, EmbeddingMatrix};
use crate::eval::{average_precision, EvalError};
use crate::lora::{project_matrix, FeatureStore, HeadKind, LoraAdapter, LoraError, ProjectionHead};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub pairs: usize,
    pub held_out: usize,
    pub latent_dim: usize,
    pub clusters: usize,
    pub d_img: usize,
    pub d_txt: usize,
    pub d_embed: usize,
    /// Spread of pairs around their cluster center.
    pub latent_noise: f64,
    /// Per-modality observation noise.
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            pairs: 200,
            held_out: 50,
            latent_dim: 16,
            clusters: 5,
            d_img: 32,
            d_txt: 24,
            d_embed: 16,
            latent_noise: 0.5,
            feature_noise: 0.1,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: FeatureStore,
    pub test: FeatureStore,
    pub train_clusters: Vec<usize>,
    pub test_clusters: Vec<usize>,
    pub head_img: ProjectionHead,
    pub head_txt: ProjectionHead,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize), std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || {
        let v: f64 = StandardNormal.sample(rng);
        std * v
    })
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData, LoraError> {
    assert!(spec.held_out < spec.pairs && spec.clusters > 0, "invalid synthetic spec");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.latent_dim;
    let centers = gaussian(&mut rng, (spec.clusters, k), 1.0);
    let map_img = gaussian(&mut rng, (spec.d_img, k), 1.0 / (k as f64).sqrt());
    let map_txt = gaussian(&mut rng, (spec.d_txt, k), 1.0 / (k as f64).sqrt());
    let w_img = gaussian(&mut rng, (spec.d_embed, spec.d_img), 1.0 / (spec.d_img as f64).sqrt());
    let w_txt = gaussian(&mut rng, (spec.d_embed, spec.d_txt), 1.0 / (spec.d_txt as f64).sqrt());

    // cluster assignment cycles so every split sees every cluster
    let clusters: Vec<usize> = (0..spec.pairs).map(|i| i % spec.clusters).collect();
    let mut z = centers.select(Axis(0), &clusters);
    z += &gaussian(&mut rng, (spec.pairs, k), spec.latent_noise);
    let img = z.dot(&map_img.t()) + gaussian(&mut rng, (spec.pairs, spec.d_img), spec.feature_noise);
    let txt = z.dot(&map_txt.t()) + gaussian(&mut rng, (spec.pairs, spec.d_txt), spec.feature_noise);

    let n_train = spec.pairs - spec.held_out;
    let ids: Vec<String> = (0..spec.pairs).map(|i| format!("syn{i:04}")).collect();
    let train = FeatureStore::from_arrays(
        ids[..n_train].to_vec(),
        img.slice(s![..n_train, ..]).to_owned(),
        txt.slice(s![..n_train, ..]).to_owned(),
    )?;
    let test = FeatureStore::from_arrays(
        ids[n_train..].to_vec(),
        img.slice(s![n_train.., ..]).to_owned(),
        txt.slice(s![n_train.., ..]).to_owned(),
    )?;
    Ok(SyntheticData {
        train,
        test,
        train_clusters: clusters[..n_train].to_vec(),
        test_clusters: clusters[n_train..].to_vec(),
        head_img: ProjectionHead::new(HeadKind::Visual, w_img.mapv(|v| v as f32)),
        head_txt: ProjectionHead::new(HeadKind::Text, w_txt.mapv(|v| v as f32)),
    })
}

fn to_matrix(ids: &[String], a: &Array2<f64>) -> EmbeddingMatrix {
    EmbeddingMatrix::new(ids.to_vec(), a.ncols(), a.iter().map(|&v| v as f32).collect()).expect("ids are unique")
}

/// Projects both sides of `store` through the heads (and adapters, when
/// given) and returns `(image embeddings, text embeddings)`.
pub fn embed_store(
    store: &FeatureStore,
    heads: (&ProjectionHead, &ProjectionHead),
    adapters: Option<(&LoraAdapter, &LoraAdapter)>,
) -> Result<(EmbeddingMatrix, EmbeddingMatrix), LoraError> {
    let img = to_matrix(store.ids(), store.img());
    let txt = to_matrix(store.ids(), store.txt());
    Ok((project_matrix(heads.0, adapters.map(|a| a.0), &img)?, project_matrix(heads.1, adapters.map(|a| a.1), &txt)?))
}

/// Image-to-text retrieval: every image queries all texts, and texts from
/// the same cluster count as relevant. Returns the mean average precision.
pub fn cluster_map(img: &EmbeddingMatrix, txt: &EmbeddingMatrix, clusters: &[usize]) -> Result<f64, EvalError> {
    let mut total = 0.0;
    for (qi, (_, q)) in img.iter().enumerate() {
        let scores: Vec<f64> = txt.iter().map(|(_, t)| cosine(q, t).unwrap_or(0.0)).collect();
        let labels: Vec<u8> = clusters.iter().map(|&c| u8::from(c == clusters[qi])).collect();
        total += average_precision(&scores, &labels)?;
    }
    Ok(total / img.rows() as f64)
}
