use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    ImageContent,
    CaptionGt,
    CaptionLq,
    DegradationImage,
    DegradationText,
}

/// A unit-norm vector tagged with what it encodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f32>,
    pub kind: EmbeddingKind,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.vector)
    }

    /// Cosine similarity, accumulated in f64.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        cosine(&self.vector, &other.vector)
    }

    /// Normalizes one row of a (K, d) or (d,) tensor.
    pub fn from_tensor(t: &Tensor, kind: EmbeddingKind) -> Result<Self> {
        let v = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        normalize_embedding(&v, kind)
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.vector, self.vector.len(), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
    }
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    dot / (l2_norm(a) * l2_norm(b))
}

/// Returns `v / ‖v‖₂`.
pub fn normalize_embedding(v: &[f32], kind: EmbeddingKind) -> Result<Embedding> {
    let norm = l2_norm(v);
    if norm == 0.0 || !norm.is_finite() {
        return Err(CoreError::ZeroVector);
    }
    Ok(Embedding {
        vector: v.iter().map(|&x| (x as f64 / norm) as f32).collect(),
        kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn three_four_five() {
        let e = normalize_embedding(&[3.0, 4.0], EmbeddingKind::ImageContent).unwrap();
        assert_eq!(e.vector, vec![0.6, 0.8]);
    }

    #[test]
    fn unit_vector_is_fixed_point() {
        let e = normalize_embedding(&[0.0, 1.0, 0.0], EmbeddingKind::CaptionGt).unwrap();
        assert_eq!(e.vector, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_vector_is_rejected() {
        assert!(matches!(
            normalize_embedding(&[0.0; 4], EmbeddingKind::CaptionLq),
            Err(CoreError::ZeroVector)
        ));
    }

    proptest! {
        #[test]
        fn normalized_has_unit_norm(v in proptest::collection::vec(-1e3f32..1e3, 1..256)) {
            prop_assume!(l2_norm(&v) > 1e-6);
            let e = normalize_embedding(&v, EmbeddingKind::DegradationText).unwrap();
            prop_assert!((e.norm() - 1.0).abs() < 1e-5);
            let again = normalize_embedding(&e.vector, EmbeddingKind::DegradationText).unwrap();
            prop_assert!((again.norm() - 1.0).abs() < 1e-5);
        }
    }
}
