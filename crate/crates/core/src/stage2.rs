//! Conditional restoration: training the noise predictor and sampling.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use vlmir_data::{derive_seed, sample_patch, Augment, DatasetManifest, DegradationLabel, ImageTensor};

use crate::checkpoint::Checkpoint;
use crate::embedding::Embedding;
use crate::error::{CoreError, Result};
use crate::losses::scalar;
use crate::optim::{cosine_lr, Adam, AdamConfig};
use crate::params::ParamStore;
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::stage1::{
    prune_checkpoints, ConditioningBundle, Stage1Model, TextMode, CHECKPOINTS_DIR, LOSS_LOG, MODEL_DIR, OPTIMIZER_DIR,
};
use crate::unet::{CondBatch, UNet, UNetConfig};

const CHECKPOINT_KIND: &str = "stage2";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossNorm {
    #[default]
    L1,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub unet: UNetConfig,
    pub schedule: ScheduleConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub loss: LossNorm,
    pub flips: bool,
    /// Condition on the ground-truth label's degradation embedding instead
    /// of the predicted one.
    pub teacher_forcing: bool,
    pub text_mode: TextMode,
    pub checkpoint_every: usize,
    pub keep_checkpoints: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            schedule: ScheduleConfig::default(),
            steps: 20_000,
            batch_size: 8,
            patch_size: 64,
            lr: 1e-4,
            min_lr: 0.0,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.0,
            loss: LossNorm::L1,
            flips: true,
            teacher_forcing: true,
            text_mode: TextMode::Caption,
            checkpoint_every: 1000,
            keep_checkpoints: 2,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        NoiseSchedule::new(&self.schedule)?;
        if self.steps == 0 || self.batch_size == 0 || self.patch_size == 0 {
            return Err(CoreError::InvalidConfig(
                "steps, batch_size and patch_size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || self.min_lr < 0.0 || self.min_lr > self.lr {
            return Err(CoreError::InvalidConfig("need 0 ≤ min_lr ≤ lr and lr > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(CoreError::InvalidConfig("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

/// Anything that predicts the noise in a diffusion state.
pub trait NoisePredictor {
    /// `x` and `mu` are (B, 3, H, W); returns ε̂ of the same shape.
    fn predict(&self, x: &Tensor, mu: &Tensor, steps: &[usize]) -> Result<Tensor>;
}

/// A U-net bound to one batch of conditioning. Its raw output is
/// preconditioned by the schedule before being used as ε̂.
pub struct ConditionedUNet<'a> {
    pub unet: &'a UNet,
    pub schedule: &'a NoiseSchedule,
    pub cond: &'a CondBatch,
}

impl NoisePredictor for ConditionedUNet<'_> {
    fn predict(&self, x: &Tensor, mu: &Tensor, steps: &[usize]) -> Result<Tensor> {
        let raw = self.unet.forward(x, mu, steps, self.cond)?;
        self.schedule.precondition_batch(x, mu, &raw, steps)
    }
}

pub struct Stage2Model {
    cfg: Stage2Config,
    store: ParamStore,
    unet: UNet,
    schedule: NoiseSchedule,
}

impl Stage2Model {
    pub fn new(cfg: &Stage2Config, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        Self::build(cfg, ParamStore::new(seed, dtype))
    }

    fn build(cfg: &Stage2Config, mut store: ParamStore) -> Result<Self> {
        let unet = UNet::new(&mut store, "unet", &cfg.unet)?;
        store.ensure_all_requested()?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            unet,
            schedule: NoiseSchedule::new(&cfg.schedule)?,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        let kind = ckpt.metadata.get("kind").and_then(|k| k.as_str());
        if kind != Some(CHECKPOINT_KIND) {
            return Err(CoreError::Incompatible(format!(
                "expected a stage-2 checkpoint, found kind {kind:?}"
            )));
        }
        let cfg: Stage2Config = serde_json::from_value(ckpt.metadata["config"].clone())
            .map_err(|e| CoreError::CorruptCheckpoint(format!("stage-2 config: {e}")))?;
        cfg.validate()?;
        Self::build(&cfg, ParamStore::from_checkpoint(ckpt, dtype)?)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(dir)?, DType::F32)
    }

    pub fn to_checkpoint(&self, seed: u64, step: usize) -> Result<Checkpoint> {
        self.store.to_checkpoint(serde_json::json!({
            "kind": CHECKPOINT_KIND,
            "config": self.cfg,
            "embed_dim": self.cfg.unet.cond_dim,
            "seed": seed,
            "step": step,
        }))
    }

    pub fn config(&self) -> &Stage2Config {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Fails unless the stage-1 model produces embeddings of the width this
    /// restorer was built for.
    pub fn check_stage1(&self, stage1: &Stage1Model) -> Result<()> {
        check_embed_dim(stage1, &self.cfg)
    }

    /// Fails if `schedule` differs from the one this model was trained with.
    pub fn check_schedule(&self, schedule: &ScheduleConfig) -> Result<()> {
        if *schedule != self.cfg.schedule {
            return Err(CoreError::Incompatible(format!(
                "requested schedule {schedule:?} differs from the trained schedule {:?}",
                self.cfg.schedule
            )));
        }
        Ok(())
    }

    /// Training loss for one batch. `x0` and `mu` are (B, 3, H, W).
    pub fn loss(&self, x0: &Tensor, mu: &Tensor, steps: &[usize], eps: &Tensor, cond: &CondBatch) -> Result<Tensor> {
        training_loss(
            &self.schedule,
            &ConditionedUNet {
                unet: &self.unet,
                schedule: &self.schedule,
                cond,
            },
            x0,
            mu,
            steps,
            eps,
            self.cfg.loss,
        )
    }
}

fn check_embed_dim(stage1: &Stage1Model, cfg: &Stage2Config) -> Result<()> {
    if stage1.embed_dim() != cfg.unet.cond_dim {
        return Err(CoreError::Incompatible(format!(
            "stage-1 embedding dim is {} but the restorer expects cond_dim {}",
            stage1.embed_dim(),
            cfg.unet.cond_dim
        )));
    }
    Ok(())
}

/// Bit patterns of every stage-1 weight; none may change during stage 2.
fn weight_bits(store: &ParamStore) -> Result<BTreeMap<String, Vec<u32>>> {
    store
        .vars()
        .iter()
        .map(|(n, v)| {
            let bits = v.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            Ok((n.clone(), bits.into_iter().map(f32::to_bits).collect()))
        })
        .collect()
}

/// Distance between the reverse state implied by the predicted noise and the
/// optimal reverse state given the true `x0`.
pub fn training_loss(
    schedule: &NoiseSchedule,
    net: &dyn NoisePredictor,
    x0: &Tensor,
    mu: &Tensor,
    steps: &[usize],
    eps: &Tensor,
    norm: LossNorm,
) -> Result<Tensor> {
    let x_i = schedule.forward_sample_batch(x0, mu, steps, eps)?;
    let eps_hat = net.predict(&x_i, mu, steps)?;
    let x0_hat = schedule.predict_x0_batch(&x_i, mu, &eps_hat, steps)?;
    let pred = schedule.optimal_reverse_state_batch(&x_i, &x0_hat, mu, steps)?;
    let target = schedule.optimal_reverse_state_batch(&x_i, x0, mu, steps)?;
    let diff = (pred - target)?;
    Ok(match norm {
        LossNorm::L1 => diff.abs()?.mean_all()?,
        LossNorm::L2 => diff.sqr()?.mean_all()?,
    })
}

/// Standard normal tensor of `shape` from `rng`.
pub fn gaussian(rng: &mut impl Rng, shape: &[usize], device: &Device, dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

/// How each reverse step is taken.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    /// Optimal reverse state plus Gaussian noise with the exact posterior
    /// standard deviation.
    Ancestral,
    /// Optimal reverse state only.
    #[default]
    Mean,
}

impl std::str::FromStr for Sampler {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ancestral" => Ok(Sampler::Ancestral),
            "mean" => Ok(Sampler::Mean),
            other => Err(format!("unknown sampler `{other}` (expected ancestral or mean)")),
        }
    }
}

/// Per-step sampler states, stored as `state.{i}` tensors.
pub type SamplerTrace = Checkpoint;

/// Reverse-time sampling from `x_T = μ + λ·ε`. Each step replaces `x0` by
/// its estimate from the predicted noise and moves to the optimal reverse
/// state, plus posterior noise for [`Sampler::Ancestral`]. Row `b` draws all
/// of its noise from `seeds[b]`, so results do not depend on batching.
/// Returns the unclamped `x_0`.
pub fn sample(
    schedule: &NoiseSchedule,
    net: &dyn NoisePredictor,
    mu: &Tensor,
    seeds: &[u64],
    sampler: Sampler,
    mut trace: Option<&mut SamplerTrace>,
) -> Result<Tensor> {
    let (b, c, h, w) = mu.dims4()?;
    if seeds.len() != b {
        return Err(CoreError::BatchMismatch(b, seeds.len()));
    }
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let draw = |rngs: &mut [ChaCha8Rng]| -> Result<Tensor> {
        let parts = rngs
            .iter_mut()
            .map(|r| gaussian(r, &[1, c, h, w], mu.device(), mu.dtype()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    };
    let mut x = (mu + (draw(&mut rngs)? * schedule.lambda())?)?;
    let t = schedule.steps();
    if let Some(tr) = trace.as_deref_mut() {
        tr.insert_tensor(&format!("state.{t}"), &x)?;
    }
    for i in (1..=t).rev() {
        let steps = vec![i; b];
        let eps_hat = net.predict(&x, mu, &steps)?;
        let x0_hat = schedule.predict_x0_batch(&x, mu, &eps_hat, &steps)?;
        x = schedule.optimal_reverse_state_batch(&x, &x0_hat, mu, &steps)?.detach();
        let std = schedule.posterior_std(i)?;
        if sampler == Sampler::Ancestral && std > 0.0 {
            x = (x + (draw(&mut rngs)? * std)?)?;
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.insert_tensor(&format!("state.{}", i - 1), &x)?;
        }
    }
    Ok(x)
}

/// Restores same-sized images, each with its own bundle and seed.
pub fn restore_batch(
    stage2: &Stage2Model,
    lqs: &[&ImageTensor],
    bundles: &[&ConditioningBundle],
    seeds: &[u64],
    sampler: Sampler,
    trace: Option<&mut SamplerTrace>,
) -> Result<Vec<ImageTensor>> {
    if lqs.len() != bundles.len() || lqs.len() != seeds.len() {
        return Err(CoreError::BatchMismatch(lqs.len(), bundles.len().min(seeds.len())));
    }
    let Some(first) = lqs.first() else {
        return Ok(Vec::new());
    };
    let (h, w) = first.dims();
    if let Some(bad) = lqs.iter().find(|i| i.dims() != (h, w)) {
        return Err(CoreError::ShapeMismatch(format!(
            "batched restoration needs equal sizes, got {:?} and {:?}",
            (h, w),
            bad.dims()
        )));
    }
    let store = &stage2.store;
    let mu = images_to_tensor(lqs, store.device(), store.dtype())?;
    let cond = stage2.unet.cond_batch(bundles, store.dtype())?;
    let x0 = sample(
        &stage2.schedule,
        &ConditionedUNet {
            unet: &stage2.unet,
            schedule: &stage2.schedule,
            cond: &cond,
        },
        &mu,
        seeds,
        sampler,
        trace,
    )?;
    tensor_to_images(&x0.clamp(0.0, 1.0)?)
}

/// Restores one image: conditions it with the stage-1 model and samples.
pub fn restore(
    stage1: &Stage1Model,
    stage2: &Stage2Model,
    lq: &ImageTensor,
    lq_caption: &str,
    mode: TextMode,
    seed: u64,
    sampler: Sampler,
    trace: Option<&mut SamplerTrace>,
) -> Result<ImageTensor> {
    stage2.check_stage1(stage1)?;
    let bundle = stage1.export_conditioning(lq, lq_caption, mode)?;
    Ok(restore_batch(stage2, &[lq], &[&bundle], &[seed], sampler, trace)?.remove(0))
}

pub fn images_to_tensor(images: &[&ImageTensor], device: &Device, dtype: DType) -> Result<Tensor> {
    let (h, w) = images.first().map_or((0, 0), |i| i.dims());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        data.extend_from_slice(&img.to_chw_vec());
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

pub fn tensor_to_images(x: &Tensor) -> Result<Vec<ImageTensor>> {
    let (b, _, h, w) = x.dims4()?;
    let x = x.to_dtype(DType::F32)?;
    (0..b)
        .map(|i| {
            let chw = x.get(i)?.flatten_all()?.to_vec1::<f32>()?;
            Ok(ImageTensor::from_chw(h, w, &chw)?)
        })
        .collect()
}

/// One row of the stage-2 loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub const STAGE2_LOG_HEADER: &str = "step,loss,lr";

impl Stage2LogRow {
    pub fn csv(&self) -> String {
        format!("{},{},{}", self.step, self.loss, self.lr)
    }
}

#[derive(Debug, Clone)]
pub struct Stage2Report {
    pub model_dir: PathBuf,
    pub log_path: PathBuf,
    pub history: Vec<Stage2LogRow>,
    pub total_steps: usize,
}

struct PairRecord {
    gt: ImageTensor,
    lq: ImageTensor,
    bundle: ConditioningBundle,
}

/// Conditioning bundles for every record, computed once with the frozen
/// stage-1 model.
pub fn precompute_bundles(
    stage1: &Stage1Model,
    manifest: &DatasetManifest,
    mode: TextMode,
    teacher_forcing: bool,
) -> Result<Vec<ConditioningBundle>> {
    let labels: BTreeMap<DegradationLabel, Embedding> = stage1.degradation_text_embeddings(&DegradationLabel::ALL)?;
    manifest
        .records
        .iter()
        .map(|r| {
            let lq = ImageTensor::load_png(manifest.lq_path(r))?;
            let caption = match (mode, r.lq_caption.as_deref()) {
                (TextMode::Caption, None) => {
                    return Err(CoreError::Data(vlmir_data::DataError::InvalidManifest(format!(
                        "record `{}` has no lq_caption; caption the manifest first",
                        r.id
                    ))))
                }
                (_, c) => c.unwrap_or_default(),
            };
            let bundle = stage1.export_with_labels(&lq, caption, mode, &labels)?;
            Ok(if teacher_forcing {
                bundle.with_label(r.degradation, &labels)
            } else {
                bundle
            })
        })
        .collect()
}

/// Trains the restorer on `manifest` with conditioning from a frozen stage-1
/// model. Writes `loss_log.csv`, `checkpoints/step_NNNNNNN/{model,optimizer}`
/// and the final weights in `model/`. With `resume`, training continues from
/// a step checkpoint and the log holds only the new steps.
pub fn train_stage2(
    manifest: &DatasetManifest,
    stage1: &Stage1Model,
    cfg: &Stage2Config,
    seed: u64,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<Stage2Report> {
    cfg.validate()?;
    manifest.validate()?;
    check_embed_dim(stage1, cfg)?;
    let (model, mut adam, start_step) = match resume {
        Some(dir) => {
            let ckpt = Checkpoint::load(dir.join(MODEL_DIR))?;
            let model = Stage2Model::from_checkpoint(&ckpt, DType::F32)?;
            if model.cfg != *cfg {
                return Err(CoreError::Incompatible(
                    "resume checkpoint was trained with a different stage-2 config".into(),
                ));
            }
            let adam = Adam::from_checkpoint(cfg.adam(), &Checkpoint::load(dir.join(OPTIMIZER_DIR))?, &model.store)?;
            let step = ckpt.metadata["step"].as_u64().unwrap_or(0) as usize;
            (model, adam, step)
        }
        None => (Stage2Model::new(cfg, seed, DType::F32)?, Adam::new(cfg.adam()), 0),
    };
    let stage1_before = weight_bits(stage1.store())?;

    let bundles = precompute_bundles(stage1, manifest, cfg.text_mode, cfg.teacher_forcing)?;
    let records = manifest
        .records
        .iter()
        .zip(bundles)
        .map(|(r, bundle)| {
            Ok(PairRecord {
                gt: ImageTensor::load_png(manifest.gt_path(r))?,
                lq: ImageTensor::load_png(manifest.lq_path(r))?,
                bundle,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = records.len();
    if n == 0 {
        return Err(CoreError::InvalidConfig(
            "stage-2 training needs at least one record".into(),
        ));
    }
    let augment = if cfg.flips { Augment::FLIPS } else { Augment::NONE };
    let t = model.schedule.steps();
    let store = &model.store;

    std::fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;
    let log_path = out_dir.join(LOSS_LOG);
    let mut log = String::from(STAGE2_LOG_HEADER);
    log.push('\n');
    let mut history = Vec::new();
    let mut orders: BTreeMap<usize, Vec<usize>> = BTreeMap::new();

    for step in start_step..cfg.steps {
        // Item k of the run is position k mod n of epoch k / n, so the
        // sequence does not depend on where a run was resumed.
        let mut gts = Vec::with_capacity(cfg.batch_size);
        let mut lqs = Vec::with_capacity(cfg.batch_size);
        let mut bundle_refs = Vec::with_capacity(cfg.batch_size);
        for j in 0..cfg.batch_size {
            let k = step * cfg.batch_size + j;
            let epoch = k / n;
            let order = orders.entry(epoch).or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("stage2/epoch/{epoch}")));
                manifest.epoch_order(manifest.metadata.mixing, &mut rng)
            });
            let rec = &records[order[k % n]];
            let (gt, lq) = sample_patch(
                &rec.gt,
                &rec.lq,
                cfg.patch_size,
                augment,
                derive_seed(seed, &format!("stage2/patch/{k}")),
            )?;
            gts.push(gt);
            lqs.push(lq);
            bundle_refs.push(&rec.bundle);
        }
        orders.retain(|&e, _| e + 1 >= (step * cfg.batch_size) / n);

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("stage2/step/{step}")));
        let steps: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(1..=t)).collect();
        let (p, dtype) = (cfg.patch_size, store.dtype());
        let eps = gaussian(&mut rng, &[cfg.batch_size, 3, p, p], store.device(), dtype)?;
        let x0 = images_to_tensor(&gts.iter().collect::<Vec<_>>(), store.device(), dtype)?;
        let mu = images_to_tensor(&lqs.iter().collect::<Vec<_>>(), store.device(), dtype)?;
        let cond = model.unet.cond_batch(&bundle_refs, dtype)?;

        let lr = cosine_lr(cfg.lr, cfg.min_lr, step, cfg.steps);
        let loss = model.loss(&x0, &mu, &steps, &eps, &cond)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(CoreError::NonFinite {
                step,
                detail: format!("loss={value} lr={lr} timesteps={steps:?}"),
            });
        }
        let grads = loss.backward()?;
        adam.step(store, &grads, lr)?;
        let row = Stage2LogRow { step, loss: value, lr };
        let _ = writeln!(log, "{}", row.csv());
        history.push(row);

        let done = step + 1;
        if done % cfg.checkpoint_every.max(1) == 0 || done == cfg.steps {
            info!("stage2 step {done}/{}: loss {value:.5}", cfg.steps);
            let dir = out_dir.join(CHECKPOINTS_DIR).join(format!("step_{done:07}"));
            model.to_checkpoint(seed, done)?.save(dir.join(MODEL_DIR))?;
            adam.to_checkpoint(serde_json::json!({"step": done}))?
                .save(dir.join(OPTIMIZER_DIR))?;
            prune_checkpoints(&out_dir.join(CHECKPOINTS_DIR), cfg.keep_checkpoints)?;
            std::fs::write(&log_path, &log).map_err(|e| CoreError::io(&log_path, e))?;
        }
    }
    std::fs::write(&log_path, &log).map_err(|e| CoreError::io(&log_path, e))?;

    let stage1_after = weight_bits(stage1.store())?;
    if let Some((name, _)) = stage1_before.iter().find(|(k, v)| stage1_after.get(*k) != Some(*v)) {
        return Err(CoreError::FrozenMutated(name.clone()));
    }
    let model_dir = out_dir.join(MODEL_DIR);
    model.to_checkpoint(seed, cfg.steps)?.save(&model_dir)?;
    Ok(Stage2Report {
        model_dir,
        log_path,
        history,
        total_steps: cfg.steps,
    })
}
