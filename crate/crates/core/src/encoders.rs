//! Text encoder (with optional LoRA), image encoder and degradation predictor.

use candle_core::{Tensor, D};
use vlmir_data::ImageTensor;

use crate::config::{EncoderConfig, LoraConfig, LoraTarget};
use crate::error::{CoreError, Result};
use crate::nn::{attention, l2_normalize, Conv2d, LayerNorm, Linear};
use crate::params::{Init, ParamStore};
use crate::tokenizer::TokenSequence;

/// Low-rank update `scale · B·A·x` with A (r, in) and zero-initialized B (out, r).
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    a: Tensor,
    b: Tensor,
    scale: f64,
}

impl LoraAdapter {
    pub fn new(store: &mut ParamStore, name: &str, inp: usize, out: usize, cfg: &LoraConfig) -> Result<Self> {
        Ok(Self {
            a: store.get(
                &format!("{name}.a"),
                &[cfg.rank, inp],
                Init::Uniform(1.0 / (inp as f64).sqrt()),
            )?,
            b: store.get(&format!("{name}.b"), &[out, cfg.rank], Init::Zeros)?,
            scale: cfg.scale,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let down = x.broadcast_matmul(&self.a.t()?)?;
        Ok((down.broadcast_matmul(&self.b.t()?)? * self.scale)?)
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
    lora_q: Option<LoraAdapter>,
    lora_v: Option<LoraAdapter>,
}

impl Block {
    fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        lora: Option<(&LoraConfig, &str)>,
    ) -> Result<Self> {
        let adapter = |store: &mut ParamStore, t: LoraTarget, suffix: &str| -> Result<Option<LoraAdapter>> {
            match lora {
                Some((cfg, prefix)) if cfg.targets(t) => Ok(Some(LoraAdapter::new(
                    store,
                    &format!("{prefix}.{suffix}"),
                    width,
                    width,
                    cfg,
                )?)),
                _ => Ok(None),
            }
        };
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width)?,
            q: Linear::new(store, &format!("{name}.attn.q"), width, width, true)?,
            k: Linear::new(store, &format!("{name}.attn.k"), width, width, true)?,
            v: Linear::new(store, &format!("{name}.attn.v"), width, width, true)?,
            out: Linear::new(store, &format!("{name}.attn.out"), width, width, true)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width)?,
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), width, 4 * width, true)?,
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), 4 * width, width, true)?,
            heads,
            lora_q: adapter(store, LoraTarget::Query, "q")?,
            lora_v: adapter(store, LoraTarget::Value, "v")?,
        })
    }

    fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let mut q = self.q.forward(&h)?;
        if let Some(l) = &self.lora_q {
            q = (q + l.forward(&h)?)?;
        }
        let k = self.k.forward(&h)?;
        let mut v = self.v.forward(&h)?;
        if let Some(l) = &self.lora_v {
            v = (v + l.forward(&h)?)?;
        }
        let (a, _) = attention(&q, &k, &v, self.heads, mask)?;
        let x = (x + self.out.forward(&a)?)?;
        let h = self.fc1.forward(&self.ln2.forward(&x)?)?.gelu()?;
        Ok((&x + self.fc2.forward(&h)?)?)
    }
}

/// Output of a text encoder for a batch of K token sequences.
#[derive(Debug, Clone)]
pub struct TextOutput {
    /// (K, d), unit-norm rows.
    pub pooled: Tensor,
    /// (K, context_length, d), projected but not normalized.
    pub token_features: Tensor,
}

/// CLIP-style causal text transformer. With `lora`, the same base weights
/// are shared and low-rank adapters are added to the chosen projections.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    token_embed: Tensor,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    proj: Linear,
    causal: Tensor,
    cfg: EncoderConfig,
}

impl TextEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &EncoderConfig,
        lora: Option<(&LoraConfig, &str)>,
    ) -> Result<Self> {
        if let Some((l, _)) = lora {
            l.validate(cfg)?;
        }
        let w = cfg.text_width;
        let token_embed = store.get(
            &format!("{prefix}.token_embed"),
            &[cfg.vocab_size, w],
            Init::Normal(0.02),
        )?;
        let pos_embed = store.get(
            &format!("{prefix}.pos_embed"),
            &[cfg.context_length, w],
            Init::Normal(0.01),
        )?;
        let blocks = (0..cfg.text_layers)
            .map(|i| {
                let lora = lora.map(|(l, p)| (l, format!("{p}.blocks.{i}")));
                Block::new(
                    store,
                    &format!("{prefix}.blocks.{i}"),
                    w,
                    cfg.text_heads,
                    lora.as_ref().map(|(l, p)| (*l, p.as_str())),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let ln_final = LayerNorm::new(store, &format!("{prefix}.ln_final"), w)?;
        let proj = Linear::new(store, &format!("{prefix}.proj"), w, cfg.embed_dim, false)?;
        let n = cfg.context_length;
        let mask: Vec<f64> = (0..n)
            .flat_map(|i| (0..n).map(move |j| if j > i { -1e9 } else { 0.0 }))
            .collect();
        let causal = Tensor::from_vec(mask, (1, 1, n, n), store.device())?.to_dtype(store.dtype())?;
        Ok(Self {
            token_embed,
            pos_embed,
            blocks,
            ln_final,
            proj,
            causal,
            cfg: cfg.clone(),
        })
    }

    pub fn forward(&self, tokens: &[TokenSequence]) -> Result<TextOutput> {
        let k = tokens.len();
        let n = self.cfg.context_length;
        let mut ids = Vec::with_capacity(k * n);
        let mut eot = Vec::with_capacity(k);
        for (row, t) in tokens.iter().enumerate() {
            if t.ids.len() != n {
                return Err(CoreError::ShapeMismatch(format!(
                    "token sequence of length {} for context {n}",
                    t.ids.len()
                )));
            }
            if let Some(&bad) = t.ids.iter().find(|&&i| i as usize >= self.cfg.vocab_size) {
                return Err(CoreError::ShapeMismatch(format!(
                    "token id {bad} outside the vocabulary"
                )));
            }
            ids.extend_from_slice(&t.ids);
            eot.push((row * n + t.eot_position()) as u32);
        }
        let dev = self.token_embed.device();
        let ids = Tensor::from_vec(ids, k * n, dev)?;
        let x = self
            .token_embed
            .index_select(&ids, 0)?
            .reshape((k, n, self.cfg.text_width))?
            .broadcast_add(&self.pos_embed)?;
        let mut x = x;
        for b in &self.blocks {
            x = b.forward(&x, Some(&self.causal))?;
        }
        let token_features = self.proj.forward(&self.ln_final.forward(&x)?)?;
        let flat = token_features.reshape((k * n, self.cfg.embed_dim))?;
        let pooled = l2_normalize(&flat.index_select(&Tensor::from_vec(eot, k, dev)?, 0)?)?;
        Ok(TextOutput { pooled, token_features })
    }
}

/// Checks sizes and resizes images to `size`×`size`, stacking them into a
/// (B, 3, size, size) tensor.
pub fn image_batch(images: &[&ImageTensor], size: usize, patch: usize, store: &ParamStore) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * 3 * size * size);
    for img in images {
        let (h, w) = (img.height(), img.width());
        if h < patch || w < patch {
            return Err(CoreError::TooSmall {
                height: h,
                width: w,
                patch,
            });
        }
        if h == size && w == size {
            data.extend(img.to_chw_vec());
        } else {
            data.extend(img.resize_bilinear(size, size).to_chw_vec());
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, size, size), store.device())?.to_dtype(store.dtype())?)
}

/// Patch-based transformer producing a unit-norm clean-content embedding.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    patch: Conv2d,
    cls: Tensor,
    pos_embed: Tensor,
    ln_pre: LayerNorm,
    blocks: Vec<Block>,
    ln_post: LayerNorm,
    proj: Linear,
    cfg: EncoderConfig,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig) -> Result<Self> {
        let w = cfg.image_width;
        let p = cfg.image_patch;
        Ok(Self {
            patch: Conv2d::new(store, &format!("{prefix}.patch"), 3, w, p, p, 0)?,
            cls: store.get(&format!("{prefix}.cls"), &[1, 1, w], Init::Normal(0.02))?,
            pos_embed: store.get(
                &format!("{prefix}.pos_embed"),
                &[cfg.num_patches() + 1, w],
                Init::Normal(0.01),
            )?,
            ln_pre: LayerNorm::new(store, &format!("{prefix}.ln_pre"), w)?,
            blocks: (0..cfg.image_layers)
                .map(|i| Block::new(store, &format!("{prefix}.blocks.{i}"), w, cfg.image_heads, None))
                .collect::<Result<Vec<_>>>()?,
            ln_post: LayerNorm::new(store, &format!("{prefix}.ln_post"), w)?,
            proj: Linear::new(store, &format!("{prefix}.proj"), w, cfg.embed_dim, false)?,
            cfg: cfg.clone(),
        })
    }

    /// `x` is (B, 3, S, S) with S = `image_size`. Returns (B, d) unit rows.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let b = x.dim(0)?;
        let w = self.cfg.image_width;
        let patches = self.patch.forward(x)?.flatten_from(2)?.transpose(1, 2)?;
        let cls = self.cls.broadcast_as((b, 1, w))?;
        let mut h = Tensor::cat(&[&cls, &patches], 1)?.broadcast_add(&self.pos_embed)?;
        h = self.ln_pre.forward(&h)?;
        for blk in &self.blocks {
            h = blk.forward(&h, None)?;
        }
        let pooled = self.ln_post.forward(&h.narrow(1, 0, 1)?.squeeze(1)?)?;
        l2_normalize(&self.proj.forward(&pooled)?)
    }
}

/// Small convolutional head mapping an image to a degradation embedding.
#[derive(Debug, Clone)]
pub struct DegradationPredictor {
    convs: Vec<Conv2d>,
    fc1: Linear,
    fc2: Linear,
}

impl DegradationPredictor {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig) -> Result<Self> {
        let c = cfg.predictor_channels;
        let convs = vec![
            Conv2d::new(store, &format!("{prefix}.conv0"), 3, c, 3, 1, 1)?,
            Conv2d::new(store, &format!("{prefix}.conv1"), c, c, 3, 2, 1)?,
            Conv2d::new(store, &format!("{prefix}.conv2"), c, 2 * c, 3, 2, 1)?,
            Conv2d::new(store, &format!("{prefix}.conv3"), 2 * c, 2 * c, 3, 2, 1)?,
        ];
        Ok(Self {
            convs,
            fc1: Linear::new(store, &format!("{prefix}.fc1"), 6 * c, cfg.embed_dim, true)?,
            fc2: Linear::new(store, &format!("{prefix}.fc2"), cfg.embed_dim, cfg.embed_dim, true)?,
        })
    }

    /// `x` is (B, 3, S, S). Returns (B, d) unit rows.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(&h)?.silu()?;
        }
        let flat = h.flatten_from(2)?;
        let mean = flat.mean_keepdim(D::Minus1)?;
        let std = (flat.broadcast_sub(&mean)?.sqr()?.mean(D::Minus1)? + 1e-6)?.sqrt()?;
        // Max pooling keeps small local artifacts visible.
        let max = flat.max(D::Minus1)?;
        let stats = Tensor::cat(&[&mean.squeeze(D::Minus1)?, &std, &max], 1)?;
        l2_normalize(&self.fc2.forward(&self.fc1.forward(&stats)?.silu()?)?)
    }
}
