use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::LoraError;
use crate::embedding::ZERO_NORM_EPS;

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>, LoraError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < ZERO_NORM_EPS {
        return Err(LoraError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Row-normalizes `z`, returning the unit rows and the original norms.
pub(crate) fn normalize_rows(z: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>), LoraError> {
    let norms = z.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if norms.iter().any(|&n| n < ZERO_NORM_EPS) {
        return Err(LoraError::ZeroVector);
    }
    let unit = z / &norms.view().insert_axis(Axis(1));
    Ok((unit, norms))
}

/// Pulls a gradient w.r.t. unit rows back to the unnormalized rows:
/// `dz = (g - z^ (z^ . g)) / |z|`.
pub(crate) fn normalize_rows_backward(unit: &Array2<f64>, norms: &Array1<f64>, g: &Array2<f64>) -> Array2<f64> {
    let mut out = g.clone();
    for ((mut o, u), &n) in out.rows_mut().into_iter().zip(unit.rows()).zip(norms) {
        let proj = u.dot(&o);
        o.zip_mut_with(&u, |gi, &ui| *gi = (*gi - ui * proj) / n);
    }
    out
}

fn check_pair(img: &ArrayView2<f64>, txt: &ArrayView2<f64>) -> Result<usize, LoraError> {
    let n = img.nrows();
    if txt.nrows() != n {
        return Err(LoraError::DimMismatch { what: "text rows", expected: n, got: txt.nrows() });
    }
    if txt.ncols() != img.ncols() {
        return Err(LoraError::DimMismatch { what: "embedding dim", expected: img.ncols(), got: txt.ncols() });
    }
    if n < 2 {
        return Err(LoraError::BatchTooSmall(n));
    }
    Ok(n)
}

/// Softmax of each row of `s`, with max subtraction; also returns the
/// per-row log-sum-exp.
fn row_softmax(s: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let mut p = s.clone();
    let mut lse = Array1::zeros(s.nrows());
    for (mut row, l) in p.rows_mut().into_iter().zip(lse.iter_mut()) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let z: f64 = row.sum();
        row.mapv_inplace(|v| v / z);
        *l = m + z.ln();
    }
    (p, lse)
}

/// Symmetric InfoNCE over in-batch negatives. Returns the loss and its
/// gradients w.r.t. the (already normalized) image and text rows.
pub(crate) fn contrastive_loss_and_grad(
    img: ArrayView2<f64>,
    txt: ArrayView2<f64>,
    logit_scale: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>), LoraError> {
    let n = check_pair(&img, &txt)?;
    let c = logit_scale.exp();
    let s = img.dot(&txt.t()) * c;
    let (p_rows, lse_rows) = row_softmax(&s);
    let st = s.t().to_owned();
    let (p_cols_t, lse_cols) = row_softmax(&st);

    let diag: f64 = s.diag().sum();
    let loss_rows = (lse_rows.sum() - diag) / n as f64;
    let loss_cols = (lse_cols.sum() - diag) / n as f64;
    let loss = 0.5 * (loss_rows + loss_cols);

    // dL/dS = (P_rows - I + (P_cols_t - I)^T) / (2n)
    let mut g = p_rows + p_cols_t.t();
    for i in 0..n {
        g[[i, i]] -= 2.0;
    }
    g /= 2.0 * n as f64;
    let d_img = g.dot(&txt) * c;
    let d_txt = g.t().dot(&img) * c;
    Ok((loss, d_img, d_txt))
}

/// Symmetric cross-entropy of `exp(logit_scale) * img txt^T` against the
/// diagonal, averaged over rows and over columns.
pub fn contrastive_loss(img: ArrayView2<f64>, txt: ArrayView2<f64>, logit_scale: f64) -> Result<f64, LoraError> {
    Ok(contrastive_loss_and_grad(img, txt, logit_scale)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        let u = [0.0, 1.0, 0.0];
        for (a, b) in l2_normalize(&u).unwrap().iter().zip(&u) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let v: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let n: f64 = l2_normalize(&v).unwrap().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        assert_eq!(l2_normalize(&[0.0, 0.0]), Err(LoraError::ZeroVector));
    }

    #[test]
    fn two_by_two_identity_at_scale_zero() {
        // S = I, loss = -log(e / (e + 1)) = softplus(-1)
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        let l = contrastive_loss(e.view(), e.view(), 0.0).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 5e-5);
    }

    #[test]
    fn identical_rows_at_zero_temperature_give_log_n() {
        // S = c * ones when every row is the same unit vector: log n at any c
        for n in [2usize, 3, 7] {
            let e = Array2::from_elem((n, 3), 1.0 / 3f64.sqrt());
            let l = contrastive_loss(e.view(), e.view(), 0.0).unwrap();
            assert!((l - (n as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn scaled_identity_closed_form() {
        // S = c I: loss = log(e^c + n - 1) - c
        let n = 4;
        let e = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 1.0 } else { 0.0 });
        for scale in [0.0f64, 1.0, 2.659_260_036_932_778] {
            let c = scale.exp();
            let l = contrastive_loss(e.view(), e.view(), scale).unwrap();
            assert!((l - ((c.exp() + (n - 1) as f64).ln() - c)).abs() < 1e-12);
        }
        // c = 0 gives log n exactly
        let l = contrastive_loss(e.view(), e.view(), f64::NEG_INFINITY).unwrap();
        assert!((l - (n as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn large_scale_drives_loss_to_zero() {
        let e = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(contrastive_loss(e.view(), e.view(), 20f64.ln()).unwrap() < 0.01);
    }

    #[test]
    fn permutation_invariant() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let raw_i = Array2::from_shape_simple_fn((5, 3), || rng.random_range(-1.0..1.0));
        let raw_t = Array2::from_shape_simple_fn((5, 3), || rng.random_range(-1.0..1.0));
        let (i, _) = normalize_rows(&raw_i).unwrap();
        let (t, _) = normalize_rows(&raw_t).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let pi = i.select(Axis(0), &perm);
        let pt = t.select(Axis(0), &perm);
        let a = contrastive_loss(i.view(), t.view(), 1.3).unwrap();
        let b = contrastive_loss(pi.view(), pt.view(), 1.3).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(a >= 0.0);
    }

    #[test]
    fn batch_too_small() {
        let e = array![[1.0, 0.0]];
        assert_eq!(contrastive_loss(e.view(), e.view(), 0.0), Err(LoraError::BatchTooSmall(1)));
    }

    #[test]
    fn embedding_gradient_matches_central_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let img = Array2::from_shape_simple_fn((3, 4), || rng.random_range(-1.0..1.0));
        let txt = Array2::from_shape_simple_fn((3, 4), || rng.random_range(-1.0..1.0));
        let (_, di, dt) = contrastive_loss_and_grad(img.view(), txt.view(), 0.7).unwrap();
        let eps = 1e-5;
        for idx in [(0, 0), (1, 3), (2, 1)] {
            let mut p = img.clone();
            p[idx] += eps;
            let mut m = img.clone();
            m[idx] -= eps;
            let fd = (contrastive_loss(p.view(), txt.view(), 0.7).unwrap()
                - contrastive_loss(m.view(), txt.view(), 0.7).unwrap())
                / (2.0 * eps);
            assert!((fd - di[idx]).abs() < 1e-8);
            let mut p = txt.clone();
            p[idx] += eps;
            let mut m = txt.clone();
            m[idx] -= eps;
            let fd = (contrastive_loss(img.view(), p.view(), 0.7).unwrap()
                - contrastive_loss(img.view(), m.view(), 0.7).unwrap())
                / (2.0 * eps);
            assert!((fd - dt[idx]).abs() < 1e-8);
        }
    }
}
