use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Shared embedding dimension `d`.
    pub embed_dim: usize,
    pub text_layers: usize,
    pub text_width: usize,
    pub text_heads: usize,
    pub context_length: usize,
    pub vocab_size: usize,
    pub image_patch: usize,
    /// Side length images are resized to before patching.
    pub image_size: usize,
    pub image_layers: usize,
    pub image_width: usize,
    pub image_heads: usize,
    /// Base channel count of the degradation predictor.
    pub predictor_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl EncoderConfig {
    pub fn toy() -> Self {
        Self {
            embed_dim: 128,
            text_layers: 2,
            text_width: 128,
            text_heads: 4,
            context_length: 32,
            vocab_size: 4096,
            image_patch: 8,
            image_size: 64,
            image_layers: 2,
            image_width: 128,
            image_heads: 4,
            predictor_channels: 32,
        }
    }

    /// Dimensions of a CLIP ViT-B/32 pair, for importing pretrained weights.
    pub fn vit_b32() -> Self {
        Self {
            embed_dim: 512,
            text_layers: 12,
            text_width: 512,
            text_heads: 8,
            context_length: 77,
            vocab_size: 49408,
            image_patch: 32,
            image_size: 224,
            image_layers: 12,
            image_width: 768,
            image_heads: 12,
            predictor_channels: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("text_layers", self.text_layers),
            ("text_width", self.text_width),
            ("text_heads", self.text_heads),
            ("vocab_size", self.vocab_size),
            ("image_patch", self.image_patch),
            ("image_size", self.image_size),
            ("image_layers", self.image_layers),
            ("image_width", self.image_width),
            ("image_heads", self.image_heads),
            ("predictor_channels", self.predictor_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CoreError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.context_length < 2 {
            return Err(CoreError::InvalidConfig("context_length must be at least 2".into()));
        }
        if self.vocab_size <= crate::tokenizer::FIRST_WORD_ID as usize {
            return Err(CoreError::InvalidConfig("vocab_size leaves no room for words".into()));
        }
        if self.text_width % self.text_heads != 0 || self.image_width % self.image_heads != 0 {
            return Err(CoreError::InvalidConfig(
                "encoder width must be divisible by its head count".into(),
            ));
        }
        if self.image_size % self.image_patch != 0 {
            return Err(CoreError::InvalidConfig(
                "image_size must be a multiple of image_patch".into(),
            ));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.image_patch).pow(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Query,
    Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    /// Multiplier on the low-rank update `B·A`.
    pub scale: f64,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            scale: 1.0,
            targets: vec![LoraTarget::Query, LoraTarget::Value],
        }
    }
}

impl LoraConfig {
    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        let max = encoder.text_width.min(encoder.embed_dim);
        if self.rank == 0 || self.rank > max {
            return Err(CoreError::InvalidConfig(format!(
                "LoRA rank {} must lie in [1, {max}]",
                self.rank
            )));
        }
        if self.targets.is_empty() {
            return Err(CoreError::InvalidConfig(
                "LoRA needs at least one target projection".into(),
            ));
        }
        if !self.scale.is_finite() {
            return Err(CoreError::InvalidConfig("LoRA scale must be finite".into()));
        }
        Ok(())
    }

    pub fn targets(&self, t: LoraTarget) -> bool {
        self.targets.contains(&t)
    }
}
