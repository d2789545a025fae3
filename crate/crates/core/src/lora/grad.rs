//! Analytic gradients of the contrastive loss with respect to the adapter
//! factors of both heads.
//!
//! Per head, with inputs `X` (`n x d_in`), dropout-masked inputs `X~` and
//! `U = X~ A^T`:
//!
//! ```text
//! Z  = X W^T + s U B^T          s = alpha / r
//! Z^ = rows of Z scaled to unit norm
//! dZ = (dZ^ - Z^ <Z^, dZ^>) / |Z|      (row-wise)
//! dB = s dZ^T U
//! dA = s (dZ B)^T X~
//! ```

use ndarray::{Array2, ArrayView2};

use super::loss::{contrastive_loss_and_grad, normalize_rows, normalize_rows_backward};
use super::{LoraAdapter, LoraError, ProjectionHead};

/// Paired pre-projection features; row `i` of each side is one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    image_feats: Array2<f64>,
    text_feats: Array2<f64>,
}

impl TrainBatch {
    pub fn new(image_feats: Array2<f64>, text_feats: Array2<f64>) -> Result<Self, LoraError> {
        let n = image_feats.nrows();
        if text_feats.nrows() != n {
            return Err(LoraError::DimMismatch { what: "pair count", expected: n, got: text_feats.nrows() });
        }
        if n < 2 {
            return Err(LoraError::BatchTooSmall(n));
        }
        Ok(Self { image_feats, text_feats })
    }

    pub fn len(&self) -> usize {
        self.image_feats.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_feats(&self) -> &Array2<f64> {
        &self.image_feats
    }

    pub fn text_feats(&self) -> &Array2<f64> {
        &self.text_feats
    }
}

/// Frozen weight of one head in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w: Array2<f64>,
}

impl From<&ProjectionHead> for HeadParams {
    fn from(h: &ProjectionHead) -> Self {
        Self { w: h.weight().mapv(f64::from) }
    }
}

/// `f64` shadow of one adapter's trainable state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub scale: f64,
}

impl From<&LoraAdapter> for AdapterParams {
    fn from(ad: &LoraAdapter) -> Self {
        Self { a: ad.a().mapv(f64::from), b: ad.b().mapv(f64::from), scale: ad.scale() }
    }
}

impl AdapterParams {
    pub fn to_adapter(&self, like: &LoraAdapter) -> LoraAdapter {
        like.with_factors(self.a.mapv(|v| v as f32), self.b.mapv(|v| v as f32))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub a_img: Array2<f64>,
    pub b_img: Array2<f64>,
    pub a_txt: Array2<f64>,
    pub b_txt: Array2<f64>,
}

struct Forward {
    x_tilde: Array2<f64>,
    u: Array2<f64>,
    unit: Array2<f64>,
    norms: ndarray::Array1<f64>,
}

fn check_head(x: &ArrayView2<f64>, head: &HeadParams, ad: &AdapterParams) -> Result<(), LoraError> {
    let (d_out, d_in) = head.w.dim();
    if x.ncols() != d_in {
        return Err(LoraError::DimMismatch { what: "feature dim", expected: d_in, got: x.ncols() });
    }
    if ad.a.ncols() != d_in || ad.b.nrows() != d_out || ad.a.nrows() != ad.b.ncols() {
        return Err(LoraError::DimMismatch { what: "adapter shape", expected: d_in, got: ad.a.ncols() });
    }
    Ok(())
}

fn forward(
    x: ArrayView2<f64>,
    head: &HeadParams,
    ad: &AdapterParams,
    mask: Option<&Array2<f64>>,
) -> Result<Forward, LoraError> {
    check_head(&x, head, ad)?;
    let x_tilde = match mask {
        Some(m) => {
            if m.dim() != x.dim() {
                return Err(LoraError::DimMismatch { what: "dropout mask", expected: x.len(), got: m.len() });
            }
            &x * m
        }
        None => x.to_owned(),
    };
    let u = x_tilde.dot(&ad.a.t());
    let z = x.dot(&head.w.t()) + u.dot(&ad.b.t()) * ad.scale;
    let (unit, norms) = normalize_rows(&z)?;
    Ok(Forward { x_tilde, u, unit, norms })
}

fn backward(fw: &Forward, ad: &AdapterParams, d_unit: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let dz = normalize_rows_backward(&fw.unit, &fw.norms, d_unit);
    let db = dz.t().dot(&fw.u) * ad.scale;
    let da = dz.dot(&ad.b).t().dot(&fw.x_tilde) * ad.scale;
    (da, db)
}

/// Loss for one batch. `masks` are per-entry input multipliers for the LoRA
/// branch (`0` or `1 / (1 - p)`); `None` disables dropout for that head.
pub fn batch_loss(
    batch: &TrainBatch,
    heads: (&HeadParams, &HeadParams),
    adapters: (&AdapterParams, &AdapterParams),
    logit_scale: f64,
    masks: (Option<&Array2<f64>>, Option<&Array2<f64>>),
) -> Result<f64, LoraError> {
    let fi = forward(batch.image_feats.view(), heads.0, adapters.0, masks.0)?;
    let ft = forward(batch.text_feats.view(), heads.1, adapters.1, masks.1)?;
    Ok(contrastive_loss_and_grad(fi.unit.view(), ft.unit.view(), logit_scale)?.0)
}

pub fn batch_loss_and_grad(
    batch: &TrainBatch,
    heads: (&HeadParams, &HeadParams),
    adapters: (&AdapterParams, &AdapterParams),
    logit_scale: f64,
    masks: (Option<&Array2<f64>>, Option<&Array2<f64>>),
) -> Result<(f64, Gradients), LoraError> {
    let fi = forward(batch.image_feats.view(), heads.0, adapters.0, masks.0)?;
    let ft = forward(batch.text_feats.view(), heads.1, adapters.1, masks.1)?;
    let (loss, d_img, d_txt) = contrastive_loss_and_grad(fi.unit.view(), ft.unit.view(), logit_scale)?;
    let (a_img, b_img) = backward(&fi, adapters.0, &d_img);
    let (a_txt, b_txt) = backward(&ft, adapters.1, &d_txt);
    Ok((loss, Gradients { a_img, b_img, a_txt, b_txt }))
}

/// Gradients w.r.t. both adapters' factors with dropout disabled.
pub fn grad(
    batch: &TrainBatch,
    heads: (&ProjectionHead, &ProjectionHead),
    adapters: (&LoraAdapter, &LoraAdapter),
    logit_scale: f64,
) -> Result<Gradients, LoraError> {
    let hp = (HeadParams::from(heads.0), HeadParams::from(heads.1));
    let ap = (AdapterParams::from(adapters.0), AdapterParams::from(adapters.1));
    Ok(batch_loss_and_grad(batch, (&hp.0, &hp.1), (&ap.0, &ap.1), logit_scale, (None, None))?.1)
}
