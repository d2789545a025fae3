use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::grad::{batch_loss_and_grad, AdapterParams, HeadParams, TrainBatch};
use super::{init_adapter, LoraAdapter, LoraConfig, LoraError, ProjectionHead};
use crate::embedding::EmbeddingMatrix;

/// `ln(1 / 0.07)`, the CLIP initial temperature, held fixed here.
pub const DEFAULT_LOGIT_SCALE: f64 = 2.659260036932778;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Momentum { beta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub logit_scale: f64,
    pub optimizer: Optimizer,
    pub lora: LoraConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 64,
            learning_rate: 1e-2,
            seed: 7,
            logit_scale: DEFAULT_LOGIT_SCALE,
            optimizer: Optimizer::Sgd,
            lora: LoraConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LoraError> {
        let bad = |m: &str| Err(LoraError::InvalidConfig(m.to_string()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !self.logit_scale.is_finite() {
            return bad("logit_scale must be finite");
        }
        if let Optimizer::Momentum { beta } = self.optimizer {
            if !(0.0..1.0).contains(&beta) {
                return bad("momentum must lie in [0, 1)");
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form; stored in adapter files.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(serde_json::to_vec(self).expect("config serializes")).into()
    }
}

/// Paired pre-projection features keyed by painting id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    ids: Vec<String>,
    img: Array2<f64>,
    txt: Array2<f64>,
}

impl FeatureStore {
    pub fn from_arrays(ids: Vec<String>, img: Array2<f64>, txt: Array2<f64>) -> Result<Self, LoraError> {
        if img.nrows() != ids.len() || txt.nrows() != ids.len() {
            return Err(LoraError::DimMismatch {
                what: "feature rows",
                expected: ids.len(),
                got: img.nrows().min(txt.nrows()),
            });
        }
        Ok(Self { ids, img, txt })
    }

    /// Looks up each id in both feature matrices.
    pub fn from_matrices<S: AsRef<str>>(
        ids: &[S],
        img: &EmbeddingMatrix,
        txt: &EmbeddingMatrix,
    ) -> Result<Self, LoraError> {
        let mut out_ids = Vec::with_capacity(ids.len());
        let mut ri = Vec::with_capacity(ids.len());
        let mut rt = Vec::with_capacity(ids.len());
        for id in ids {
            let id = id.as_ref();
            let (Some(i), Some(t)) = (img.position(id), txt.position(id)) else {
                return Err(LoraError::MissingFeatures(id.to_string()));
            };
            out_ids.push(id.to_string());
            ri.push(i);
            rt.push(t);
        }
        let img = img.to_array_f64().select(Axis(0), &ri);
        let txt = txt.to_array_f64().select(Axis(0), &rt);
        Self::from_arrays(out_ids, img, txt)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn img(&self) -> &Array2<f64> {
        &self.img
    }

    pub fn txt(&self) -> &Array2<f64> {
        &self.txt
    }

    pub fn batch(&self, rows: &[usize]) -> Result<TrainBatch, LoraError> {
        TrainBatch::new(self.img.select(Axis(0), rows), self.txt.select(Axis(0), rows))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub adapter_img: LoraAdapter,
    pub adapter_txt: LoraAdapter,
    /// Mean batch loss per epoch, measured before each batch's update.
    pub loss_history: Vec<f64>,
}

fn dropout_mask(rng: &mut ChaCha8Rng, shape: (usize, usize), p: f64) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { 0.0 } else { keep })
}

struct Slot {
    params: AdapterParams,
    vel_a: Array2<f64>,
    vel_b: Array2<f64>,
}

impl Slot {
    fn new(ad: &LoraAdapter) -> Self {
        let params = AdapterParams::from(ad);
        let vel_a = Array2::zeros(params.a.dim());
        let vel_b = Array2::zeros(params.b.dim());
        Self { params, vel_a, vel_b }
    }

    fn step(&mut self, ga: &Array2<f64>, gb: &Array2<f64>, lr: f64, opt: Optimizer) {
        match opt {
            Optimizer::Sgd => {
                self.params.a.scaled_add(-lr, ga);
                self.params.b.scaled_add(-lr, gb);
            }
            Optimizer::Momentum { beta } => {
                self.vel_a.zip_mut_with(ga, |v, &g| *v = beta * *v + g);
                self.vel_b.zip_mut_with(gb, |v, &g| *v = beta * *v + g);
                self.params.a.scaled_add(-lr, &self.vel_a);
                self.params.b.scaled_add(-lr, &self.vel_b);
            }
        }
    }
}

/// SGD over shuffled in-batch-negative batches. Adapters start from
/// [`init_adapter`] with seeds `seed` (visual) and `seed + 1` (text).
/// Deterministic for a fixed config.
pub fn train(
    store: &FeatureStore,
    heads: (&ProjectionHead, &ProjectionHead),
    config: &TrainConfig,
) -> Result<TrainOutcome, LoraError> {
    config.validate()?;
    let needed = 2 * config.batch_size;
    if store.len() < needed {
        return Err(LoraError::InsufficientData { needed, got: store.len() });
    }
    let (hi, ht) = heads;
    if store.img.ncols() != hi.d_in() {
        return Err(LoraError::DimMismatch { what: "image feature dim", expected: hi.d_in(), got: store.img.ncols() });
    }
    if store.txt.ncols() != ht.d_in() {
        return Err(LoraError::DimMismatch { what: "text feature dim", expected: ht.d_in(), got: store.txt.ncols() });
    }
    if hi.d_out() != ht.d_out() {
        return Err(LoraError::DimMismatch { what: "embedding dim", expected: hi.d_out(), got: ht.d_out() });
    }

    let init_img = init_adapter(hi.d_in(), hi.d_out(), config.lora, config.seed)?;
    let init_txt = init_adapter(ht.d_in(), ht.d_out(), config.lora, config.seed.wrapping_add(1))?;
    let head_params = (HeadParams::from(hi), HeadParams::from(ht));
    let mut img = Slot::new(&init_img);
    let mut txt = Slot::new(&init_txt);
    let p = f64::from(config.lora.dropout_p);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..store.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for rows in order.chunks(config.batch_size) {
            if rows.len() < 2 {
                continue;
            }
            let batch = store.batch(rows)?;
            let masks = if p > 0.0 {
                let mi = dropout_mask(&mut rng, batch.image_feats().dim(), p);
                let mt = dropout_mask(&mut rng, batch.text_feats().dim(), p);
                Some((mi, mt))
            } else {
                None
            };
            let (loss, g) = batch_loss_and_grad(
                &batch,
                (&head_params.0, &head_params.1),
                (&img.params, &txt.params),
                config.logit_scale,
                (masks.as_ref().map(|m| &m.0), masks.as_ref().map(|m| &m.1)),
            )?;
            img.step(&g.a_img, &g.b_img, config.learning_rate, config.optimizer);
            txt.step(&g.a_txt, &g.b_txt, config.learning_rate, config.optimizer);
            total += loss;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::debug!("epoch {epoch}: mean loss {mean:.6}");
        history.push(mean);
    }

    Ok(TrainOutcome {
        adapter_img: img.params.to_adapter(&init_img),
        adapter_txt: txt.params.to_adapter(&init_txt),
        loss_history: history,
    })
}
