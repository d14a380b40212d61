//! Vision-language alignment: model, losses, training and conditioning export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vlmir_data::{derive_seed, DatasetManifest, DegradationLabel, ImageTensor};

use crate::checkpoint::Checkpoint;
use crate::config::{EncoderConfig, LoraConfig};
use crate::embedding::{cosine, Embedding, EmbeddingKind};
use crate::encoders::{image_batch, DegradationPredictor, ImageEncoder, TextEncoder};
use crate::error::{CoreError, Result};
use crate::losses::{contrastive_loss, mean_cosine_loss, scalar, symmetric_contrastive_loss, Stage1Losses};
use crate::optim::{cosine_lr, Adam, AdamConfig};
use crate::params::{Init, ParamStore};
use crate::tokenizer::{tokenize, TokenSequence};

pub const TEMPERATURE: &str = "temperature";
/// Caption used by the fixed-text conditioning mode.
pub const FIXED_PROMPT: &str = "This is a photo";
const CHECKPOINT_KIND: &str = "stage1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub encoder: EncoderConfig,
    pub lora: LoraConfig,
    /// Weight of the caption cosine loss.
    pub alpha: f64,
    pub temperature_init: f64,
    pub temperature_min: f64,
    pub temperature_max: f64,
    /// Fine-tune the image encoder alongside the predictor and adapters.
    pub train_image_encoder: bool,
    /// Average both contrastive directions instead of image-to-text only.
    pub symmetric_loss: bool,
    /// `{label}` is replaced by the lowercase degradation name.
    pub prompt_template: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Epoch checkpoints kept on disk; older ones are deleted.
    pub keep_checkpoints: usize,
    /// Random horizontal and vertical flips of the degradation predictor input.
    pub flips: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::toy(),
            lora: LoraConfig::default(),
            alpha: 0.5,
            temperature_init: 0.07,
            temperature_min: 0.01,
            temperature_max: 1.0,
            train_image_encoder: false,
            symmetric_loss: false,
            prompt_template: "a photo that is degraded by {label}".into(),
            epochs: 30,
            batch_size: 32,
            lr: 1e-4,
            min_lr: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            keep_checkpoints: 2,
            flips: false,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.lora.validate(&self.encoder)?;
        if !(self.temperature_min > 0.0
            && self.temperature_min <= self.temperature_init
            && self.temperature_init <= self.temperature_max)
        {
            return Err(CoreError::InvalidConfig(
                "temperature bounds must satisfy 0 < min <= init <= max".into(),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::InvalidConfig(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || self.min_lr < 0.0 || !(self.alpha >= 0.0) {
            return Err(CoreError::InvalidConfig(
                "lr must be positive; min_lr and alpha non-negative".into(),
            ));
        }
        if !self.prompt_template.contains("{label}") {
            return Err(CoreError::InvalidConfig(
                "prompt_template must contain `{label}`".into(),
            ));
        }
        Ok(())
    }

    pub fn prompt(&self, label: DegradationLabel) -> String {
        self.prompt_template.replace("{label}", label.as_str())
    }
}

/// Which text, if any, conditions the restorer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextMode {
    /// The LQ caption through the adapted text encoder.
    #[default]
    Caption,
    /// The constant [`FIXED_PROMPT`] through the adapted text encoder.
    Fixed,
    /// No text: the restorer substitutes its learned null token.
    Null,
}

impl std::str::FromStr for TextMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "caption" => Ok(TextMode::Caption),
            "fixed" => Ok(TextMode::Fixed),
            "null" => Ok(TextMode::Null),
            other => Err(format!("unknown text mode `{other}` (expected caption, fixed or null)")),
        }
    }
}

impl std::fmt::Display for TextMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TextMode::Caption => "caption",
            TextMode::Fixed => "fixed",
            TextMode::Null => "null",
        })
    }
}

/// Per-token caption features for cross-attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextTokens {
    /// Row-major (len, d).
    pub features: Vec<f32>,
    pub len: usize,
    pub dim: usize,
    /// Leading rows that hold real tokens; the rest are padding.
    pub valid: usize,
}

impl TextTokens {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Everything the restorer is conditioned on for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningBundle {
    /// `None` selects the restorer's learned null token.
    pub text_tokens: Option<TextTokens>,
    pub image_embed: Embedding,
    pub degradation_embed: Embedding,
    pub predicted_label: DegradationLabel,
}

impl ConditioningBundle {
    /// Swaps the degradation embedding for that of `label`.
    pub fn with_label(mut self, label: DegradationLabel, label_embeds: &BTreeMap<DegradationLabel, Embedding>) -> Self {
        if let Some(e) = label_embeds.get(&label) {
            self.degradation_embed = e.clone();
        }
        self
    }
}

/// Returns the label whose text embedding has the highest cosine with
/// `image_embed`, plus all scores. Exact ties go to the earlier label in
/// raindrop, haze, noise order.
pub fn classify_degradation(
    image_embed: &[f32],
    label_embeds: &BTreeMap<DegradationLabel, Embedding>,
) -> Result<(DegradationLabel, BTreeMap<DegradationLabel, f64>)> {
    let mut best: Option<(DegradationLabel, f64)> = None;
    let mut scores = BTreeMap::new();
    for (&label, e) in label_embeds {
        if e.vector.len() != image_embed.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "label embedding dim {} vs image embedding dim {}",
                e.vector.len(),
                image_embed.len()
            )));
        }
        let s = cosine(image_embed, &e.vector);
        scores.insert(label, s);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((label, s));
        }
    }
    best.map(|(l, _)| (l, scores))
        .ok_or_else(|| CoreError::InvalidConfig("no label embeddings to classify against".into()))
}

/// A training batch. Image tensors are already resized to the encoder size.
#[derive(Debug, Clone)]
pub struct AlignmentBatch {
    /// (K, 3, S, S).
    pub lq_images: Tensor,
    pub gt_caption_tokens: Vec<TokenSequence>,
    pub lq_caption_tokens: Vec<TokenSequence>,
    pub degradation_labels: Vec<DegradationLabel>,
    /// Precomputed f^I_LQ rows when the image encoder is frozen.
    pub image_embeds: Option<Tensor>,
    /// Precomputed pooled GT-caption embeddings.
    pub gt_text_embeds: Option<Tensor>,
}

impl AlignmentBatch {
    pub fn new(
        model: &Stage1Model,
        images: &[&ImageTensor],
        gt_captions: &[&str],
        lq_captions: &[&str],
        labels: &[DegradationLabel],
    ) -> Result<Self> {
        let k = images.len();
        for n in [gt_captions.len(), lq_captions.len(), labels.len()] {
            if n != k {
                return Err(CoreError::BatchMismatch(k, n));
            }
        }
        if k == 0 {
            return Err(CoreError::ShapeMismatch("empty batch".into()));
        }
        Ok(Self {
            lq_images: model.image_tensor(images)?,
            gt_caption_tokens: gt_captions.iter().map(|c| model.tokenize(c)).collect(),
            lq_caption_tokens: lq_captions.iter().map(|c| model.tokenize(c)).collect(),
            degradation_labels: labels.to_vec(),
            image_embeds: None,
            gt_text_embeds: None,
        })
    }

    pub fn len(&self) -> usize {
        self.degradation_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.degradation_labels.is_empty()
    }
}

pub struct Stage1Model {
    cfg: Stage1Config,
    store: ParamStore,
    image: ImageEncoder,
    text: TextEncoder,
    text_lq: TextEncoder,
    predictor: DegradationPredictor,
    temperature: Tensor,
}

impl Stage1Model {
    /// Fresh model. The frozen text encoder (and the image encoder unless
    /// configured trainable) are never updated by training.
    pub fn new(cfg: &Stage1Config, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        Self::build(cfg, ParamStore::new(seed, dtype))
    }

    fn build(cfg: &Stage1Config, mut store: ParamStore) -> Result<Self> {
        store.freeze("text.");
        if !cfg.train_image_encoder {
            store.freeze("image.");
        }
        let e = &cfg.encoder;
        let image = ImageEncoder::new(&mut store, "image", e)?;
        let text = TextEncoder::new(&mut store, "text", e, None)?;
        let text_lq = TextEncoder::new(&mut store, "text", e, Some((&cfg.lora, "lora")))?;
        let predictor = DegradationPredictor::new(&mut store, "predictor", e)?;
        let temperature = store.get(TEMPERATURE, &[1], Init::Const(cfg.temperature_init))?;
        store.ensure_all_requested()?;
        let model = Self {
            cfg: cfg.clone(),
            store,
            image,
            text,
            text_lq,
            predictor,
            temperature,
        };
        let prompts: Vec<_> = DegradationLabel::ALL
            .iter()
            .map(|&l| model.tokenize(&cfg.prompt(l)).ids)
            .collect();
        if (1..prompts.len()).any(|i| prompts[..i].contains(&prompts[i])) {
            return Err(CoreError::InvalidConfig(
                "label prompts tokenize identically; raise context_length or vocab_size".into(),
            ));
        }
        Ok(model)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        let kind = ckpt.metadata.get("kind").and_then(|k| k.as_str());
        if kind != Some(CHECKPOINT_KIND) {
            return Err(CoreError::Incompatible(format!(
                "expected a stage-1 checkpoint, found kind {kind:?}"
            )));
        }
        let cfg: Stage1Config = serde_json::from_value(ckpt.metadata["config"].clone())
            .map_err(|e| CoreError::CorruptCheckpoint(format!("stage-1 config: {e}")))?;
        cfg.validate()?;
        Self::build(&cfg, ParamStore::from_checkpoint(ckpt, dtype)?)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(dir)?, DType::F32)
    }

    pub fn to_checkpoint(&self, seed: u64, step: usize, epoch: usize) -> Result<Checkpoint> {
        self.store.to_checkpoint(serde_json::json!({
            "kind": CHECKPOINT_KIND,
            "config": self.cfg,
            "seed": seed,
            "step": step,
            "epoch": epoch,
        }))
    }

    pub fn config(&self) -> &Stage1Config {
        &self.cfg
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.encoder.embed_dim
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn temperature(&self) -> Result<f64> {
        scalar(&self.temperature)
    }

    /// Projects the temperature back into its configured range.
    pub fn clamp_temperature(&self) -> Result<()> {
        let s = self
            .temperature()?
            .clamp(self.cfg.temperature_min, self.cfg.temperature_max);
        self.store.set(TEMPERATURE, &Tensor::new(&[s], self.store.device())?)
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        tokenize(text, self.cfg.encoder.context_length, self.cfg.encoder.vocab_size)
    }

    pub fn image_tensor(&self, images: &[&ImageTensor]) -> Result<Tensor> {
        image_batch(
            images,
            self.cfg.encoder.image_size,
            self.cfg.encoder.image_patch,
            &self.store,
        )
    }

    pub fn image_features(&self, x: &Tensor) -> Result<Tensor> {
        self.image.forward(x)
    }

    pub fn predictor_features(&self, x: &Tensor) -> Result<Tensor> {
        self.predictor.forward(x)
    }

    pub fn text_frozen(&self, tokens: &[TokenSequence]) -> Result<crate::encoders::TextOutput> {
        self.text.forward(tokens)
    }

    pub fn text_lq(&self, tokens: &[TokenSequence]) -> Result<crate::encoders::TextOutput> {
        self.text_lq.forward(tokens)
    }

    pub fn encode_image(&self, img: &ImageTensor) -> Result<Embedding> {
        Embedding::from_tensor(
            &self.image_features(&self.image_tensor(&[img])?)?,
            EmbeddingKind::ImageContent,
        )
    }

    pub fn predict_degradation(&self, img: &ImageTensor) -> Result<Embedding> {
        Embedding::from_tensor(
            &self.predictor_features(&self.image_tensor(&[img])?)?,
            EmbeddingKind::DegradationImage,
        )
    }

    /// Pooled embedding and (context_length, d) token features.
    pub fn encode_text_frozen(&self, tokens: &TokenSequence) -> Result<(Embedding, Tensor)> {
        let out = self.text.forward(std::slice::from_ref(tokens))?;
        Ok((
            Embedding::from_tensor(&out.pooled, EmbeddingKind::CaptionGt)?,
            out.token_features.squeeze(0)?,
        ))
    }

    pub fn encode_text_lq(&self, tokens: &TokenSequence) -> Result<(Embedding, Tensor)> {
        let out = self.text_lq.forward(std::slice::from_ref(tokens))?;
        Ok((
            Embedding::from_tensor(&out.pooled, EmbeddingKind::CaptionLq)?,
            out.token_features.squeeze(0)?,
        ))
    }

    pub fn degradation_text_embeddings(
        &self,
        labels: &[DegradationLabel],
    ) -> Result<BTreeMap<DegradationLabel, Embedding>> {
        let tokens: Vec<_> = labels.iter().map(|&l| self.tokenize(&self.cfg.prompt(l))).collect();
        let pooled = self.text.forward(&tokens)?.pooled;
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                Ok((
                    l,
                    Embedding::from_tensor(&pooled.get(i)?, EmbeddingKind::DegradationText)?,
                ))
            })
            .collect()
    }

    /// (3, d) label embeddings in enum order, detached.
    fn label_matrix(&self) -> Result<Tensor> {
        let tokens: Vec<_> = DegradationLabel::ALL
            .iter()
            .map(|&l| self.tokenize(&self.cfg.prompt(l)))
            .collect();
        Ok(self.text.forward(&tokens)?.pooled.detach())
    }

    /// Returns the differentiable total and the component values.
    pub fn losses(&self, batch: &AlignmentBatch) -> Result<(Tensor, Stage1Losses)> {
        let labels = self.label_matrix()?;
        self.losses_with_labels(batch, &labels)
    }

    fn losses_with_labels(&self, batch: &AlignmentBatch, label_matrix: &Tensor) -> Result<(Tensor, Stage1Losses)> {
        let f_img = match &batch.image_embeds {
            Some(t) => t.clone(),
            None => self.image.forward(&batch.lq_images)?,
        };
        let f_gt = match &batch.gt_text_embeds {
            Some(t) => t.clone(),
            None => self.text.forward(&batch.gt_caption_tokens)?.pooled,
        };
        let f_deg = self.predictor.forward(&batch.lq_images)?;
        let idx: Vec<u32> = batch.degradation_labels.iter().map(|l| l.index() as u32).collect();
        let f_deg_text = label_matrix.index_select(&Tensor::from_vec(idx, batch.len(), self.store.device())?, 0)?;
        let f_lq = self.text_lq.forward(&batch.lq_caption_tokens)?.pooled;

        let contrast = if self.cfg.symmetric_loss {
            symmetric_contrastive_loss
        } else {
            contrastive_loss
        };
        let l_content = contrast(&f_img, &f_gt, &self.temperature)?;
        let l_degradation = contrast(&f_deg, &f_deg_text, &self.temperature)?;
        let l_caption = mean_cosine_loss(&f_lq, &f_gt)?;
        let total = ((&l_content + &l_degradation)? + (&l_caption * self.cfg.alpha)?)?;
        let values = Stage1Losses::compose(
            scalar(&l_content)?,
            scalar(&l_degradation)?,
            scalar(&l_caption)?,
            self.cfg.alpha,
        );
        Ok((total, values))
    }

    /// Conditioning for the restorer; the degradation embedding is that of
    /// the predicted label.
    pub fn export_conditioning(
        &self,
        img: &ImageTensor,
        lq_caption: &str,
        mode: TextMode,
    ) -> Result<ConditioningBundle> {
        let labels = self.degradation_text_embeddings(&DegradationLabel::ALL)?;
        self.export_with_labels(img, lq_caption, mode, &labels)
    }

    pub fn export_with_labels(
        &self,
        img: &ImageTensor,
        lq_caption: &str,
        mode: TextMode,
        labels: &BTreeMap<DegradationLabel, Embedding>,
    ) -> Result<ConditioningBundle> {
        let x = self.image_tensor(&[img])?;
        let image_embed = Embedding::from_tensor(&self.image.forward(&x)?, EmbeddingKind::ImageContent)?;
        let f_deg = Embedding::from_tensor(&self.predictor.forward(&x)?, EmbeddingKind::DegradationImage)?;
        let (predicted_label, _) = classify_degradation(&f_deg.vector, labels)?;
        let text = match mode {
            TextMode::Null => None,
            TextMode::Caption | TextMode::Fixed => {
                let caption = if mode == TextMode::Fixed {
                    FIXED_PROMPT
                } else {
                    lq_caption
                };
                let tokens = self.tokenize(caption);
                let (_, features) = self.encode_text_lq(&tokens)?;
                let (len, dim) = features.dims2()?;
                Some(TextTokens {
                    features: features.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?,
                    len,
                    dim,
                    valid: tokens.length,
                })
            }
        };
        Ok(ConditioningBundle {
            text_tokens: text,
            image_embed,
            degradation_embed: labels[&predicted_label].clone(),
            predicted_label,
        })
    }

    /// Fraction of `images` whose predicted label matches.
    pub fn classification_accuracy(&self, images: &[(&ImageTensor, DegradationLabel)]) -> Result<f64> {
        let labels = self.degradation_text_embeddings(&DegradationLabel::ALL)?;
        let mut correct = 0usize;
        for chunk in images.chunks(32) {
            let imgs: Vec<_> = chunk.iter().map(|(i, _)| *i).collect();
            let feats = self
                .predictor
                .forward(&self.image_tensor(&imgs)?)?
                .to_dtype(DType::F32)?
                .to_vec2::<f32>()?;
            for (row, (_, truth)) in feats.iter().zip(chunk) {
                if classify_degradation(row, &labels)?.0 == *truth {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / images.len().max(1) as f64)
    }
}

/// One row of the stage-1 loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1LogRow {
    pub step: usize,
    pub l_content: f64,
    pub l_degradation: f64,
    pub l_caption: f64,
    pub total: f64,
    pub lr: f64,
    pub s: f64,
}

pub const STAGE1_LOG_HEADER: &str = "step,l_content,l_degradation,l_caption,total,lr,s";

impl Stage1LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.l_content, self.l_degradation, self.l_caption, self.total, self.lr, self.s
        )
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Report {
    pub model_dir: PathBuf,
    pub log_path: PathBuf,
    pub history: Vec<Stage1LogRow>,
    pub total_steps: usize,
}

pub const MODEL_DIR: &str = "model";
pub const OPTIMIZER_DIR: &str = "optimizer";
pub const CHECKPOINTS_DIR: &str = "checkpoints";
pub const LOSS_LOG: &str = "loss_log.csv";

struct TrainRecord {
    /// CHW at encoder size.
    image: Vec<f32>,
    gt_tokens: TokenSequence,
    lq_tokens: TokenSequence,
    label: DegradationLabel,
}

fn load_records(manifest: &DatasetManifest, model: &Stage1Model) -> Result<Vec<TrainRecord>> {
    let e = &model.cfg.encoder;
    manifest
        .records
        .iter()
        .map(|r| {
            let missing = |what: &str| {
                CoreError::Data(vlmir_data::DataError::InvalidManifest(format!(
                    "record `{}` has no {what}; caption the manifest first",
                    r.id
                )))
            };
            let gt = r.gt_caption.as_deref().ok_or_else(|| missing("gt_caption"))?;
            let lq = r.lq_caption.as_deref().ok_or_else(|| missing("lq_caption"))?;
            let img = ImageTensor::load_png(manifest.lq_path(r))?;
            if img.height() < e.image_patch || img.width() < e.image_patch {
                return Err(CoreError::TooSmall {
                    height: img.height(),
                    width: img.width(),
                    patch: e.image_patch,
                });
            }
            let image = if img.dims() == (e.image_size, e.image_size) {
                img.to_chw_vec()
            } else {
                img.resize_bilinear(e.image_size, e.image_size).to_chw_vec()
            };
            Ok(TrainRecord {
                image,
                gt_tokens: model.tokenize(gt),
                lq_tokens: model.tokenize(lq),
                label: r.degradation,
            })
        })
        .collect()
}

fn stack_images(records: &[TrainRecord], idx: &[usize], size: usize, store: &ParamStore) -> Result<Tensor> {
    let mut data = Vec::with_capacity(idx.len() * 3 * size * size);
    for &i in idx {
        data.extend_from_slice(&records[i].image);
    }
    Ok(Tensor::from_vec(data, (idx.len(), 3, size, size), store.device())?.to_dtype(store.dtype())?)
}

/// Like [`stack_images`], each image flipped along each axis with
/// probability 1/2.
fn stack_flipped(
    records: &[TrainRecord],
    idx: &[usize],
    size: usize,
    store: &ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let plane = size * size;
    let mut data = Vec::with_capacity(idx.len() * 3 * plane);
    for &i in idx {
        let (h, v) = (rng.random::<bool>(), rng.random::<bool>());
        let src = &records[i].image;
        for c in 0..3 {
            for y in 0..size {
                let sy = if v { size - 1 - y } else { y };
                let row = &src[c * plane + sy * size..c * plane + (sy + 1) * size];
                if h {
                    data.extend(row.iter().rev());
                } else {
                    data.extend_from_slice(row);
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (idx.len(), 3, size, size), store.device())?.to_dtype(store.dtype())?)
}

fn frozen_snapshot(store: &ParamStore) -> Result<BTreeMap<String, Vec<u32>>> {
    store
        .vars()
        .iter()
        .filter(|(n, _)| store.is_frozen(n))
        .map(|(n, v)| {
            let bits = v.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            Ok((n.clone(), bits.into_iter().map(f32::to_bits).collect()))
        })
        .collect()
}

/// Trains stage 1 on `manifest`, writing into `out_dir`:
/// `loss_log.csv`, `checkpoints/epoch_NNNN/{model,optimizer}` and the final
/// weights in `model/`. With `resume`, training continues from an epoch
/// checkpoint directory and the log holds only the new steps.
pub fn train_stage1(
    manifest: &DatasetManifest,
    cfg: &Stage1Config,
    seed: u64,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<Stage1Report> {
    cfg.validate()?;
    manifest.validate()?;
    let (model, mut adam, start_epoch) = match resume {
        Some(dir) => {
            let ckpt = Checkpoint::load(dir.join(MODEL_DIR))?;
            let model = Stage1Model::from_checkpoint(&ckpt, DType::F32)?;
            if model.cfg != *cfg {
                return Err(CoreError::Incompatible(
                    "resume checkpoint was trained with a different stage-1 config".into(),
                ));
            }
            let adam = Adam::from_checkpoint(
                adam_config(cfg),
                &Checkpoint::load(dir.join(OPTIMIZER_DIR))?,
                &model.store,
            )?;
            let epoch = ckpt.metadata["epoch"].as_u64().unwrap_or(0) as usize;
            (model, adam, epoch)
        }
        None => (Stage1Model::new(cfg, seed, DType::F32)?, Adam::new(adam_config(cfg)), 0),
    };
    let frozen_before = frozen_snapshot(&model.store)?;

    let records = load_records(manifest, &model)?;
    let n = records.len();
    let size = cfg.encoder.image_size;
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let label_matrix = model.label_matrix()?;

    // Frozen encoders see the same inputs every epoch, so embed once.
    let all: Vec<usize> = (0..n).collect();
    let mut gt_text = Vec::with_capacity(n);
    let mut img_embeds = Vec::with_capacity(n);
    for chunk in all.chunks(64) {
        let toks: Vec<_> = chunk.iter().map(|&i| records[i].gt_tokens.clone()).collect();
        gt_text.push(model.text.forward(&toks)?.pooled.detach());
        if !cfg.train_image_encoder {
            img_embeds.push(
                model
                    .image
                    .forward(&stack_images(&records, chunk, size, &model.store)?)?
                    .detach(),
            );
        }
    }
    let gt_text = Tensor::cat(&gt_text, 0)?;
    let img_embeds = if cfg.train_image_encoder {
        None
    } else {
        Some(Tensor::cat(&img_embeds, 0)?)
    };

    std::fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;
    let log_path = out_dir.join(LOSS_LOG);
    let mut log = String::from(STAGE1_LOG_HEADER);
    log.push('\n');
    let mut history = Vec::new();

    for epoch in start_epoch..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("stage1/epoch/{epoch}")));
        let order = manifest.epoch_order(manifest.metadata.mixing, &mut rng);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let step = epoch * steps_per_epoch + b;
            let lr = cosine_lr(cfg.lr, cfg.min_lr, step, total_steps);
            let ids = Tensor::from_vec(
                idx.iter().map(|&i| i as u32).collect::<Vec<_>>(),
                idx.len(),
                model.store.device(),
            )?;
            let batch = AlignmentBatch {
                lq_images: if cfg.flips {
                    stack_flipped(&records, idx, size, &model.store, &mut rng)?
                } else {
                    stack_images(&records, idx, size, &model.store)?
                },
                gt_caption_tokens: idx.iter().map(|&i| records[i].gt_tokens.clone()).collect(),
                lq_caption_tokens: idx.iter().map(|&i| records[i].lq_tokens.clone()).collect(),
                degradation_labels: idx.iter().map(|&i| records[i].label).collect(),
                image_embeds: img_embeds.as_ref().map(|t| t.index_select(&ids, 0)).transpose()?,
                gt_text_embeds: Some(gt_text.index_select(&ids, 0)?),
            };
            let (total, losses) = model.losses_with_labels(&batch, &label_matrix)?;
            if !losses.is_finite() {
                return Err(CoreError::NonFinite {
                    step,
                    detail: format!(
                        "l_content={} l_degradation={} l_caption={} total={}",
                        losses.l_content, losses.l_degradation, losses.l_caption, losses.total
                    ),
                });
            }
            let s = model.temperature()?;
            let grads = total.backward()?;
            adam.step(&model.store, &grads, lr)?;
            model.clamp_temperature()?;
            let row = Stage1LogRow {
                step,
                l_content: losses.l_content,
                l_degradation: losses.l_degradation,
                l_caption: losses.l_caption,
                total: losses.total,
                lr,
                s,
            };
            let _ = writeln!(log, "{}", row.csv());
            history.push(row);
        }
        let last_step = (epoch + 1) * steps_per_epoch;
        info!(
            "stage1 epoch {}/{}: total {:.4}",
            epoch + 1,
            cfg.epochs,
            history.last().map_or(f64::NAN, |r| r.total)
        );
        let dir = out_dir.join(CHECKPOINTS_DIR).join(format!("epoch_{:04}", epoch + 1));
        model
            .to_checkpoint(seed, last_step, epoch + 1)?
            .save(dir.join(MODEL_DIR))?;
        adam.to_checkpoint(serde_json::json!({"epoch": epoch + 1, "step": last_step}))?
            .save(dir.join(OPTIMIZER_DIR))?;
        prune_checkpoints(&out_dir.join(CHECKPOINTS_DIR), cfg.keep_checkpoints)?;
        std::fs::write(&log_path, &log).map_err(|e| CoreError::io(&log_path, e))?;
    }
    std::fs::write(&log_path, &log).map_err(|e| CoreError::io(&log_path, e))?;

    let frozen_after = frozen_snapshot(&model.store)?;
    if let Some((name, _)) = frozen_before.iter().find(|(k, v)| frozen_after.get(*k) != Some(*v)) {
        return Err(CoreError::FrozenMutated(name.clone()));
    }
    let model_dir = out_dir.join(MODEL_DIR);
    model.to_checkpoint(seed, total_steps, cfg.epochs)?.save(&model_dir)?;
    Ok(Stage1Report {
        model_dir,
        log_path,
        history,
        total_steps,
    })
}

fn adam_config(cfg: &Stage1Config) -> AdamConfig {
    AdamConfig {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: 1e-8,
        weight_decay: cfg.weight_decay,
    }
}

pub(crate) fn prune_checkpoints(dir: &Path, keep: usize) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CoreError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    let excess = entries.len().saturating_sub(keep.max(1));
    for p in &entries[..excess] {
        std::fs::remove_dir_all(p).map_err(|e| CoreError::io(p, e))?;
    }
    Ok(())
}
