//! Conditional U-net noise predictor.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{attention, key_padding_mask, timestep_embedding, Conv2d, GroupNorm, Linear};
use crate::params::{Init, ParamStore};
use crate::stage1::ConditioningBundle;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    /// Semantic (text) cross-attention only.
    Sca,
    /// Image cross-attention only.
    Ica,
    /// Text cross-attention followed by image cross-attention.
    #[default]
    Both,
}

impl AttentionVariant {
    pub fn has_sca(self) -> bool {
        matches!(self, AttentionVariant::Sca | AttentionVariant::Both)
    }

    pub fn has_ica(self) -> bool {
        matches!(self, AttentionVariant::Ica | AttentionVariant::Both)
    }
}

impl std::str::FromStr for AttentionVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sca" => Ok(AttentionVariant::Sca),
            "ica" => Ok(AttentionVariant::Ica),
            "both" => Ok(AttentionVariant::Both),
            other => Err(format!("unknown variant `{other}` (expected sca, ica or both)")),
        }
    }
}

impl std::fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttentionVariant::Sca => "sca",
            AttentionVariant::Ica => "ica",
            AttentionVariant::Both => "both",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    /// Level indices (0 = full resolution) that get cross-attention. The
    /// middle block counts as the deepest level.
    pub attn_levels: Vec<usize>,
    pub num_res_blocks: usize,
    /// Conditioning width; must equal the stage-1 embedding dimension.
    pub cond_dim: usize,
    pub num_heads: usize,
    /// Learnable prompt tokens fused with the degradation embedding.
    pub prompt_len: usize,
    pub groups: usize,
    pub variant: AttentionVariant,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            channel_mults: vec![1, 2, 4],
            attn_levels: vec![1, 2],
            num_res_blocks: 1,
            cond_dim: 128,
            num_heads: 4,
            prompt_len: 4,
            groups: 8,
            variant: AttentionVariant::Both,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::InvalidConfig(m.to_string()));
        if self.base_channels == 0 || self.cond_dim == 0 || self.num_heads == 0 || self.prompt_len == 0 {
            return bad("U-net widths, heads and prompt_len must be positive");
        }
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return bad("channel_mults must be a non-empty list of positive integers");
        }
        if self.num_res_blocks == 0 || self.groups == 0 {
            return bad("num_res_blocks and groups must be positive");
        }
        if let Some(&l) = self.attn_levels.iter().find(|&&l| l >= self.channel_mults.len()) {
            return Err(CoreError::InvalidConfig(format!(
                "attention level {l} does not exist ({} levels)",
                self.channel_mults.len()
            )));
        }
        for &m in &self.channel_mults {
            if (m * self.base_channels) % self.num_heads != 0 {
                return bad("every level's channel count must be divisible by num_heads");
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    /// Spatial sizes are padded up to a multiple of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels() - 1)
    }
}

/// Conditioning tensors for a batch.
#[derive(Debug, Clone)]
pub struct CondBatch {
    /// (B, L, d).
    pub text: Tensor,
    /// Additive key mask, (B, 1, 1, L).
    pub text_mask: Tensor,
    /// (B, 1, d).
    pub image: Tensor,
    /// (B, d).
    pub degradation: Tensor,
}

#[derive(Debug, Clone)]
struct CrossAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl CrossAttention {
    fn new(store: &mut ParamStore, name: &str, channels: usize, cfg: &UNetConfig) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels, cfg.groups)?,
            q: Linear::new(store, &format!("{name}.q"), channels, channels, false)?,
            k: Linear::new(store, &format!("{name}.k"), cfg.cond_dim, channels, false)?,
            v: Linear::new(store, &format!("{name}.v"), cfg.cond_dim, channels, false)?,
            out: Linear::zeros(store, &format!("{name}.out"), channels, channels)?,
            heads: cfg.num_heads,
        })
    }

    /// `x` is (B, C, H, W); `context` is (B, L, d).
    fn forward(&self, x: &Tensor, context: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let q_in = self.norm.forward(x)?.reshape((b, c, h * w))?.transpose(1, 2)?;
        let (a, _) = attention(
            &self.q.forward(&q_in)?,
            &self.k.forward(context)?,
            &self.v.forward(context)?,
            self.heads,
            mask,
        )?;
        let out = self.out.forward(&a)?.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((x + out)?)
    }

    /// Attention weights (B, heads, H·W, L), for inspection.
    fn weights(&self, x: &Tensor, context: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let q_in = self.norm.forward(x)?.reshape((b, c, h * w))?.transpose(1, 2)?;
        let (_, weights) = attention(
            &self.q.forward(&q_in)?,
            &self.k.forward(context)?,
            &self.v.forward(context)?,
            self.heads,
            mask,
        )?;
        Ok(weights)
    }
}

/// Semantic cross-attention: queries from features, keys and values from
/// the caption token features.
#[derive(Debug, Clone)]
pub struct ScaBlock(CrossAttention);

/// Image cross-attention against the single clean-image embedding token.
#[derive(Debug, Clone)]
pub struct IcaBlock(CrossAttention);

impl ScaBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, cfg: &UNetConfig) -> Result<Self> {
        Ok(Self(CrossAttention::new(store, name, channels, cfg)?))
    }

    /// `features` is (B, C, H, W), `text_tokens` (B, L, d), `mask` (B, 1, 1, L).
    pub fn forward(&self, features: &Tensor, text_tokens: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        self.0.forward(features, text_tokens, mask)
    }

    pub fn attention_weights(&self, features: &Tensor, text_tokens: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        self.0.weights(features, text_tokens, mask)
    }
}

impl IcaBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, cfg: &UNetConfig) -> Result<Self> {
        Ok(Self(CrossAttention::new(store, name, channels, cfg)?))
    }

    /// `image_embed` is (B, 1, d) or (B, d).
    pub fn forward(&self, features: &Tensor, image_embed: &Tensor) -> Result<Tensor> {
        let ctx = if image_embed.rank() == 2 {
            image_embed.unsqueeze(1)?
        } else {
            image_embed.clone()
        };
        self.0.forward(features, &ctx, None)
    }

    pub fn attention_weights(&self, features: &Tensor, image_embed: &Tensor) -> Result<Tensor> {
        let ctx = if image_embed.rank() == 2 {
            image_embed.unsqueeze(1)?
        } else {
            image_embed.clone()
        };
        self.0.weights(features, &ctx, None)
    }
}

/// Maps the fused degradation code to per-channel `(γ, β)` and applies
/// `(1 + γ)⊙x + β`. The head starts at zero, so the block starts as identity.
#[derive(Debug, Clone)]
pub struct DegradationModulation {
    head: Linear,
    channels: usize,
}

impl DegradationModulation {
    pub fn new(store: &mut ParamStore, name: &str, cond_dim: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            head: Linear::zeros(store, name, cond_dim, 2 * channels)?,
            channels,
        })
    }

    /// `(γ, β)`, each (B, C).
    pub fn scale_shift(&self, fused: &Tensor) -> Result<(Tensor, Tensor)> {
        let gb = self.head.forward(fused)?;
        Ok((
            gb.narrow(1, 0, self.channels)?,
            gb.narrow(1, self.channels, self.channels)?,
        ))
    }

    /// `x` is (B, C, ...); `fused` is (B, d).
    pub fn forward(&self, x: &Tensor, fused: &Tensor) -> Result<Tensor> {
        let (gamma, beta) = self.scale_shift(fused)?;
        let mut shape = vec![1; x.rank()];
        shape[0] = x.dim(0)?;
        shape[1] = self.channels;
        let gamma = (gamma + 1.0)?.reshape(shape.as_slice())?;
        let beta = beta.reshape(shape.as_slice())?;
        Ok(x.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

/// Learnable prompt fused with the degradation embedding:
/// `SiLU(W·[f_D ; mean(prompt)] + b)`.
#[derive(Debug, Clone)]
pub struct PromptFusion {
    prompt: Tensor,
    fuse: Linear,
}

impl PromptFusion {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &UNetConfig) -> Result<Self> {
        Ok(Self {
            prompt: store.get(
                &format!("{name}.prompt"),
                &[cfg.prompt_len, cfg.cond_dim],
                Init::Normal(0.02),
            )?,
            fuse: Linear::new(store, &format!("{name}.fuse"), 2 * cfg.cond_dim, cfg.cond_dim, true)?,
        })
    }

    /// `degradation` is (B, d); returns (B, d).
    pub fn forward(&self, degradation: &Tensor) -> Result<Tensor> {
        let b = degradation.dim(0)?;
        let d = degradation.dim(1)?;
        let prompt = self.prompt.mean_keepdim(0)?.broadcast_as((b, d))?;
        Ok(self.fuse.forward(&Tensor::cat(&[degradation, &prompt], 1)?)?.silu()?)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    modulation: DegradationModulation,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        inp: usize,
        out: usize,
        temb_dim: usize,
        cfg: &UNetConfig,
    ) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), inp, cfg.groups)?,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), inp, out, 3, 1, 1)?,
            temb: Linear::new(store, &format!("{name}.temb"), temb_dim, out, true)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), out, cfg.groups)?,
            modulation: DegradationModulation::new(store, &format!("{name}.modulation"), cfg.cond_dim, out)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), out, out, 3, 1, 1)?,
            skip: if inp != out {
                Some(Conv2d::new(store, &format!("{name}.skip"), inp, out, 1, 1, 0)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor, fused: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.temb.forward(temb)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.modulation.forward(&self.norm2.forward(&h)?, fused)?;
        let h = self.conv2.forward(&h.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// Cross-attention applied after a residual block: SCA, then ICA.
#[derive(Debug, Clone)]
struct AttnStage {
    sca: Option<ScaBlock>,
    ica: Option<IcaBlock>,
}

impl AttnStage {
    fn new(store: &mut ParamStore, name: &str, channels: usize, cfg: &UNetConfig) -> Result<Self> {
        Ok(Self {
            sca: if cfg.variant.has_sca() {
                Some(ScaBlock::new(store, &format!("{name}.sca"), channels, cfg)?)
            } else {
                None
            },
            ica: if cfg.variant.has_ica() {
                Some(IcaBlock::new(store, &format!("{name}.ica"), channels, cfg)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, cond: &CondBatch) -> Result<Tensor> {
        let mut h = x.clone();
        if let Some(sca) = &self.sca {
            h = sca.forward(&h, &cond.text, Some(&cond.text_mask))?;
        }
        if let Some(ica) = &self.ica {
            h = ica.forward(&h, &cond.image)?;
        }
        Ok(h)
    }

    fn layout(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.sca.is_some() {
            v.push("sca");
        }
        if self.ica.is_some() {
            v.push("ica");
        }
        v
    }
}

#[derive(Debug, Clone)]
struct Stage {
    res: ResBlock,
    attn: Option<AttnStage>,
}

impl Stage {
    fn forward(&self, x: &Tensor, temb: &Tensor, fused: &Tensor, cond: &CondBatch) -> Result<Tensor> {
        let h = self.res.forward(x, temb, fused)?;
        match &self.attn {
            Some(a) => a.forward(&h, cond),
            None => Ok(h),
        }
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    cfg: UNetConfig,
    conv_in: Conv2d,
    time1: Linear,
    time2: Linear,
    fusion: PromptFusion,
    null_text: Tensor,
    down: Vec<Vec<Stage>>,
    downsample: Vec<Conv2d>,
    mid1: Stage,
    mid2: ResBlock,
    upsample: Vec<Conv2d>,
    up: Vec<Vec<Stage>>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let c0 = cfg.base_channels;
        let temb_dim = 4 * c0;
        let levels = cfg.levels();
        let ch = |l: usize| cfg.channel_mults[l] * c0;
        let p = |s: &str| format!("{prefix}.{s}");
        let attn = |store: &mut ParamStore, name: &str, l: usize| -> Result<Option<AttnStage>> {
            if cfg.attn_levels.contains(&l) {
                Ok(Some(AttnStage::new(store, name, ch(l), cfg)?))
            } else {
                Ok(None)
            }
        };

        let conv_in = Conv2d::new(store, &p("conv_in"), 6, c0, 3, 1, 1)?;
        let time1 = Linear::new(store, &p("time.fc1"), c0, temb_dim, true)?;
        let time2 = Linear::new(store, &p("time.fc2"), temb_dim, temb_dim, true)?;
        let fusion = PromptFusion::new(store, &p("fusion"), cfg)?;
        let null_text = store.get(&p("null_text"), &[1, cfg.cond_dim], Init::Normal(0.02))?;

        let mut down = Vec::with_capacity(levels);
        let mut downsample = Vec::new();
        let mut c = c0;
        for l in 0..levels {
            let mut stages = Vec::new();
            for r in 0..cfg.num_res_blocks {
                let name = p(&format!("down.{l}.{r}"));
                stages.push(Stage {
                    res: ResBlock::new(store, &name, c, ch(l), temb_dim, cfg)?,
                    attn: attn(store, &format!("{name}.attn"), l)?,
                });
                c = ch(l);
            }
            down.push(stages);
            if l + 1 < levels {
                downsample.push(Conv2d::new(store, &p(&format!("downsample.{l}")), c, c, 3, 2, 1)?);
            }
        }
        let deepest = levels - 1;
        let mid1 = Stage {
            res: ResBlock::new(store, &p("mid.res1"), c, c, temb_dim, cfg)?,
            attn: attn(store, &p("mid.attn"), deepest)?,
        };
        let mid2 = ResBlock::new(store, &p("mid.res2"), c, c, temb_dim, cfg)?;

        let mut up = Vec::with_capacity(levels);
        let mut upsample = Vec::new();
        for l in (0..levels).rev() {
            if l + 1 < levels {
                upsample.push(Conv2d::new(store, &p(&format!("upsample.{l}")), c, c, 3, 1, 1)?);
            }
            let mut stages = Vec::new();
            for r in 0..cfg.num_res_blocks {
                let inp = if r == 0 { c + ch(l) } else { ch(l) };
                let name = p(&format!("up.{l}.{r}"));
                stages.push(Stage {
                    res: ResBlock::new(store, &name, inp, ch(l), temb_dim, cfg)?,
                    attn: attn(store, &format!("{name}.attn"), l)?,
                });
                c = ch(l);
            }
            up.push(stages);
        }
        let norm_out = GroupNorm::new(store, &p("norm_out"), c0, cfg.groups)?;
        let conv_out = Conv2d::new(store, &p("conv_out"), c0, 3, 3, 1, 1)?;
        Ok(Self {
            cfg: cfg.clone(),
            conv_in,
            time1,
            time2,
            fusion,
            null_text,
            down,
            downsample,
            mid1,
            mid2,
            upsample,
            up,
            norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    /// Cross-attention blocks in execution order, as (location, blocks).
    pub fn attention_layout(&self) -> Vec<(String, Vec<&'static str>)> {
        let mut out = Vec::new();
        let mut push = |name: String, a: &Option<AttnStage>| {
            if let Some(a) = a {
                out.push((name, a.layout()));
            }
        };
        for (l, stages) in self.down.iter().enumerate() {
            for (r, s) in stages.iter().enumerate() {
                push(format!("down.{l}.{r}"), &s.attn);
            }
        }
        push("mid".into(), &self.mid1.attn);
        let levels = self.cfg.levels();
        for (i, stages) in self.up.iter().enumerate() {
            for (r, s) in stages.iter().enumerate() {
                push(format!("up.{}.{r}", levels - 1 - i), &s.attn);
            }
        }
        out
    }

    /// Stacks bundles into batch tensors. Bundles without text use the
    /// learned null token as their only key.
    pub fn cond_batch(&self, bundles: &[&ConditioningBundle], dtype: DType) -> Result<CondBatch> {
        let d = self.cfg.cond_dim;
        let dev = self.null_text.device().clone();
        let len = bundles
            .iter()
            .map(|b| b.text_tokens.as_ref().map_or(1, |t| t.len))
            .max()
            .unwrap_or(1);
        let mut text = Vec::with_capacity(bundles.len());
        let mut valid = Vec::with_capacity(bundles.len());
        let mut image = Vec::with_capacity(bundles.len() * d);
        let mut degradation = Vec::with_capacity(bundles.len() * d);
        for b in bundles {
            for e in [&b.image_embed, &b.degradation_embed] {
                if e.dim() != d {
                    return Err(CoreError::ShapeMismatch(format!(
                        "conditioning embedding has dim {}, restorer expects {d}",
                        e.dim()
                    )));
                }
            }
            image.extend_from_slice(&b.image_embed.vector);
            degradation.extend_from_slice(&b.degradation_embed.vector);
            match &b.text_tokens {
                Some(t) => {
                    if t.dim != d {
                        return Err(CoreError::ShapeMismatch(format!(
                            "text tokens have dim {}, restorer expects {d}",
                            t.dim
                        )));
                    }
                    let mut rows = t.features.clone();
                    rows.resize(len * d, 0.0);
                    text.push(Tensor::from_vec(rows, (len, d), &dev)?.to_dtype(dtype)?);
                    valid.push(t.valid.clamp(1, t.len));
                }
                None => {
                    let null = self.null_text.to_dtype(dtype)?;
                    let row = if len > 1 {
                        Tensor::cat(&[&null, &Tensor::zeros((len - 1, d), dtype, &dev)?], 0)?
                    } else {
                        null
                    };
                    text.push(row);
                    valid.push(1);
                }
            }
        }
        let b = bundles.len();
        Ok(CondBatch {
            text: Tensor::stack(&text, 0)?,
            text_mask: key_padding_mask(&valid, len, &dev, dtype)?,
            image: Tensor::from_vec(image, (b, 1, d), &dev)?.to_dtype(dtype)?,
            degradation: Tensor::from_vec(degradation, (b, d), &dev)?.to_dtype(dtype)?,
        })
    }

    /// Predicts the noise in `x` (B, 3, H, W) given the LQ image `mu` and
    /// per-item steps. Inputs are edge-padded to the U-net's size multiple
    /// and the output is cropped back.
    pub fn forward(&self, x: &Tensor, mu: &Tensor, steps: &[usize], cond: &CondBatch) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if mu.dims() != x.dims() || c != 3 {
            return Err(CoreError::ShapeMismatch(format!(
                "state {:?} and condition {:?} must both be (B, 3, H, W)",
                x.dims(),
                mu.dims()
            )));
        }
        if steps.len() != b || cond.degradation.dim(0)? != b {
            return Err(CoreError::BatchMismatch(b, steps.len()));
        }
        let m = self.cfg.size_multiple();
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let input = Tensor::cat(&[x, mu], 1)?;
        let input = if (ph, pw) != (h, w) {
            input.pad_with_same(2, 0, ph - h)?.pad_with_same(3, 0, pw - w)?
        } else {
            input
        };

        let temb = timestep_embedding(steps, self.cfg.base_channels, x.device(), x.dtype())?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu()?)?.silu()?;
        let fused = self.fusion.forward(&cond.degradation)?;

        let mut hcur = self.conv_in.forward(&input)?;
        let mut skips = Vec::with_capacity(self.cfg.levels());
        for (l, stages) in self.down.iter().enumerate() {
            for s in stages {
                hcur = s.forward(&hcur, &temb, &fused, cond)?;
            }
            skips.push(hcur.clone());
            if let Some(ds) = self.downsample.get(l) {
                hcur = ds.forward(&hcur)?;
            }
        }
        hcur = self.mid1.forward(&hcur, &temb, &fused, cond)?;
        hcur = self.mid2.forward(&hcur, &temb, &fused)?;
        for (i, stages) in self.up.iter().enumerate() {
            if i > 0 {
                let (_, _, hh, ww) = hcur.dims4()?;
                hcur = self.upsample[i - 1].forward(&hcur.upsample_nearest2d(2 * hh, 2 * ww)?)?;
            }
            let skip = skips.pop().expect("one skip per level");
            hcur = Tensor::cat(&[&hcur, &skip], 1)?;
            for s in stages {
                hcur = s.forward(&hcur, &temb, &fused, cond)?;
            }
        }
        let out = self.conv_out.forward(&self.norm_out.forward(&hcur)?.silu()?)?;
        Ok(if (ph, pw) != (h, w) {
            out.narrow(2, 0, h)?.narrow(3, 0, w)?
        } else {
            out
        })
    }
}
