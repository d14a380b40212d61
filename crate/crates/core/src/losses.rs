use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

const NORM_TOLERANCE: f64 = 1e-3;

fn check_pair(m: &Tensor, n: &Tensor) -> Result<usize> {
    let (km, dm) = m.dims2()?;
    let (kn, dn) = n.dims2()?;
    if km != kn {
        return Err(CoreError::BatchMismatch(km, kn));
    }
    if dm != dn {
        return Err(CoreError::ShapeMismatch(format!("embedding dims {dm} and {dn}")));
    }
    if km == 0 {
        return Err(CoreError::ShapeMismatch("empty batch".into()));
    }
    Ok(km)
}

fn check_unit_rows(t: &Tensor) -> Result<()> {
    let norms = t
        .to_dtype(DType::F64)?
        .sqr()?
        .sum(D::Minus1)?
        .sqrt()?
        .to_vec1::<f64>()?;
    for (row, norm) in norms.into_iter().enumerate() {
        if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
            return Err(CoreError::NotNormalized { row, norm });
        }
    }
    Ok(())
}

/// Image-to-text contrastive loss over a batch of K matched pairs:
/// `−(1/K) Σᵢ log softmax_j(mᵢ·nⱼ / s)[i]`.
///
/// `m` and `n` are (K, d) with unit-norm rows; `s` is a one-element
/// temperature tensor. Logits are shifted by their row maximum before
/// exponentiation.
pub fn contrastive_loss(m: &Tensor, n: &Tensor, s: &Tensor) -> Result<Tensor> {
    check_pair(m, n)?;
    check_unit_rows(m)?;
    check_unit_rows(n)?;
    let logits = m.matmul(&n.t()?)?.broadcast_div(&s.reshape((1, 1))?)?;
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum(1)?.log()?;
    let positives = (m * n)?.sum(1)?.broadcast_div(&s.reshape(1)?)?.sub(&max.squeeze(1)?)?;
    Ok((lse - positives)?.mean_all()?)
}

/// Average of the image-to-text and text-to-image directions.
pub fn symmetric_contrastive_loss(m: &Tensor, n: &Tensor, s: &Tensor) -> Result<Tensor> {
    let forward = contrastive_loss(m, n, s)?;
    let backward = contrastive_loss(n, m, s)?;
    Ok(((forward + backward)? * 0.5)?)
}

/// Per-row `1 − cos(aᵢ, bᵢ)` for (K, d) inputs; returns (K,).
pub fn cosine_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_pair(a, b)?;
    let na = a.sqr()?.sum(1)?.sqrt()?;
    let nb = b.sqr()?.sum(1)?.sqrt()?;
    let min = na.minimum(&nb)?.to_dtype(DType::F64)?.min_all()?.to_scalar::<f64>()?;
    if min == 0.0 {
        return Err(CoreError::ZeroVector);
    }
    let cos = (a * b)?.sum(1)?.div(&(na * nb)?)?;
    Ok(cos.neg()?.affine(1.0, 1.0)?)
}

/// Batch mean of [`cosine_loss`].
pub fn mean_cosine_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(cosine_loss(a, b)?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Losses {
    pub l_content: f64,
    pub l_degradation: f64,
    pub l_caption: f64,
    pub alpha: f64,
    pub total: f64,
}

impl Stage1Losses {
    pub fn compose(l_content: f64, l_degradation: f64, l_caption: f64, alpha: f64) -> Self {
        Self {
            l_content,
            l_degradation,
            l_caption,
            alpha,
            total: l_content + l_degradation + alpha * l_caption,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_content, self.l_degradation, self.l_caption, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}
