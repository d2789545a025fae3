use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::LoraError;
use crate::embedding::EmbeddingMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Visual,
    Text,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Visual => "visual",
            HeadKind::Text => "text",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "visual" => Ok(HeadKind::Visual),
            "text" => Ok(HeadKind::Text),
            other => Err(format!("unknown head {other:?}")),
        }
    }
}

/// A frozen `d_out x d_in` projection matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    kind: HeadKind,
    weight: Array2<f32>,
}

impl ProjectionHead {
    pub fn new(kind: HeadKind, weight: Array2<f32>) -> Self {
        Self { kind, weight }
    }

    /// One matrix row per output dimension.
    pub fn from_matrix(kind: HeadKind, m: &EmbeddingMatrix) -> Self {
        let w = Array2::from_shape_vec((m.rows(), m.dim()), m.data().to_vec()).expect("matrix shape is consistent");
        Self::new(kind, w)
    }

    pub fn to_matrix(&self) -> EmbeddingMatrix {
        let ids = (0..self.d_out()).map(|i| format!("row{i}")).collect();
        EmbeddingMatrix::new(ids, self.d_in(), self.weight.iter().copied().collect()).expect("d_in > 0")
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn weight(&self) -> &Array2<f32> {
        &self.weight
    }

    pub fn d_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.nrows()
    }
}

/// Rank, scaling and dropout shared by both heads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f32,
    pub dropout_p: f32,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 16, alpha: 32.0, dropout_p: 0.05 }
    }
}

/// Trainable factors `A` (`r x d_in`) and `B` (`d_out x r`).
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    a: Array2<f32>,
    b: Array2<f32>,
    alpha: f32,
    dropout_p: f32,
    seed: u64,
}

impl LoraAdapter {
    pub fn from_parts(
        a: Array2<f32>,
        b: Array2<f32>,
        alpha: f32,
        dropout_p: f32,
        seed: u64,
    ) -> Result<Self, LoraError> {
        let rank = a.nrows();
        let (d_in, d_out) = (a.ncols(), b.nrows());
        if rank == 0 {
            return Err(LoraError::ZeroRank);
        }
        if b.ncols() != rank {
            return Err(LoraError::DimMismatch { what: "B columns vs rank", expected: rank, got: b.ncols() });
        }
        if rank > d_in.min(d_out) {
            return Err(LoraError::RankTooLarge { rank, d_in, d_out });
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(LoraError::InvalidAlpha(alpha));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(LoraError::InvalidDropout(dropout_p));
        }
        Ok(Self { a, b, alpha, dropout_p, seed })
    }

    pub fn a(&self) -> &Array2<f32> {
        &self.a
    }

    pub fn b(&self) -> &Array2<f32> {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.a.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.b.nrows()
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    pub fn dropout_p(&self) -> f32 {
        self.dropout_p
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `alpha / r`.
    pub fn scale(&self) -> f64 {
        f64::from(self.alpha) / self.rank() as f64
    }

    pub fn config(&self) -> LoraConfig {
        LoraConfig { rank: self.rank(), alpha: self.alpha, dropout_p: self.dropout_p }
    }

    pub(crate) fn with_factors(&self, a: Array2<f32>, b: Array2<f32>) -> Self {
        debug_assert_eq!(a.dim(), self.a.dim());
        debug_assert_eq!(b.dim(), self.b.dim());
        Self { a, b, ..self.clone() }
    }

    /// The materialized update `(alpha / r) B A`, `d_out x d_in`.
    pub fn delta_f64(&self) -> Array2<f64> {
        let a = self.a.mapv(f64::from);
        let b = self.b.mapv(f64::from);
        b.dot(&a) * self.scale()
    }

    fn check(&self, head: &ProjectionHead) -> Result<(), LoraError> {
        if self.d_in() != head.d_in() {
            return Err(LoraError::DimMismatch { what: "adapter d_in", expected: head.d_in(), got: self.d_in() });
        }
        if self.d_out() != head.d_out() {
            return Err(LoraError::DimMismatch { what: "adapter d_out", expected: head.d_out(), got: self.d_out() });
        }
        Ok(())
    }
}

/// `A ~ N(0, 1/r)` from a seeded generator, `B = 0`.
pub fn init_adapter(d_in: usize, d_out: usize, cfg: LoraConfig, seed: u64) -> Result<LoraAdapter, LoraError> {
    if cfg.rank == 0 {
        return Err(LoraError::ZeroRank);
    }
    if cfg.rank > d_in.min(d_out) {
        return Err(LoraError::RankTooLarge { rank: cfg.rank, d_in, d_out });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (cfg.rank as f64).sqrt()).expect("positive std");
    let a = Array2::from_shape_simple_fn((cfg.rank, d_in), || normal.sample(&mut rng) as f32);
    let b = Array2::zeros((d_out, cfg.rank));
    LoraAdapter::from_parts(a, b, cfg.alpha, cfg.dropout_p, seed)
}

pub enum DropoutMode<'r> {
    Eval,
    Train(&'r mut dyn rand::RngCore),
}

/// `W x` only, accumulated in `f64`.
pub fn project_frozen(head: &ProjectionHead, x: &[f32]) -> Result<Vec<f32>, LoraError> {
    if x.len() != head.d_in() {
        return Err(LoraError::DimMismatch { what: "input", expected: head.d_in(), got: x.len() });
    }
    Ok(frozen_f64(head, x).into_iter().map(|v| v as f32).collect())
}

fn frozen_f64(head: &ProjectionHead, x: &[f32]) -> Vec<f64> {
    head.weight
        .rows()
        .into_iter()
        .map(|row| row.iter().zip(x).fold(0.0f64, |acc, (&w, &xi)| acc + f64::from(w) * f64::from(xi)))
        .collect()
}

/// `W x + (alpha / r) B A x~`, where `x~` is `x` with inverted dropout in
/// train mode and `x` itself in eval mode. The frozen path never sees
/// dropout.
pub fn project(
    head: &ProjectionHead,
    adapter: &LoraAdapter,
    x: &[f32],
    mode: DropoutMode<'_>,
) -> Result<Vec<f32>, LoraError> {
    adapter.check(head)?;
    if x.len() != head.d_in() {
        return Err(LoraError::DimMismatch { what: "input", expected: head.d_in(), got: x.len() });
    }
    let p = f64::from(adapter.dropout_p);
    let x_tilde: Vec<f64> = match mode {
        DropoutMode::Train(rng) if p > 0.0 => {
            x.iter().map(|&v| if rng.random::<f64>() < p { 0.0 } else { f64::from(v) / (1.0 - p) }).collect()
        }
        _ => x.iter().map(|&v| f64::from(v)).collect(),
    };
    let u: Vec<f64> = adapter
        .a
        .rows()
        .into_iter()
        .map(|row| row.iter().zip(&x_tilde).fold(0.0f64, |acc, (&a, &xi)| acc + f64::from(a) * xi))
        .collect();
    let scale = adapter.scale();
    let out = frozen_f64(head, x)
        .into_iter()
        .zip(adapter.b.rows())
        .map(|(f, brow)| {
            let d = brow.iter().zip(&u).fold(0.0f64, |acc, (&b, &ui)| acc + f64::from(b) * ui);
            (f + scale * d) as f32
        })
        .collect();
    Ok(out)
}

/// Projects every row of `feats` (eval mode), keeping row ids. With no
/// adapter this is the frozen baseline.
pub fn project_matrix(
    head: &ProjectionHead,
    adapter: Option<&LoraAdapter>,
    feats: &EmbeddingMatrix,
) -> Result<EmbeddingMatrix, LoraError> {
    let mut data = Vec::with_capacity(feats.rows() * head.d_out());
    for (_, x) in feats.iter() {
        let z = match adapter {
            Some(ad) => project(head, ad, x, DropoutMode::Eval)?,
            None => project_frozen(head, x)?,
        };
        data.extend(z);
    }
    Ok(EmbeddingMatrix::new(feats.ids().to_vec(), head.d_out(), data).expect("ids come from a valid matrix"))
}

/// Folds the adapter into a new frozen head: `W + (alpha / r) B A`.
pub fn merge(head: &ProjectionHead, adapter: &LoraAdapter) -> Result<ProjectionHead, LoraError> {
    adapter.check(head)?;
    let delta = adapter.delta_f64();
    let mut w = head.weight.clone();
    w.zip_mut_with(&delta, |w, &d| {
        // keep untouched weights bit-identical
        if d != 0.0 {
            *w = (f64::from(*w) + d) as f32;
        }
    });
    Ok(ProjectionHead::new(head.kind, w))
}
