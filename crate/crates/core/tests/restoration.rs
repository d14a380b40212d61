use std::path::Path;

use candle_core::DType;
use vlmir_core::config::{EncoderConfig, LoraConfig};
use vlmir_core::stage1::{Stage1Config, Stage1Model, TextMode, CHECKPOINTS_DIR, MODEL_DIR};
use vlmir_core::stage2::{
    images_to_tensor, precompute_bundles, restore_batch, train_stage2, Sampler, Stage2Config, Stage2Model,
};
use vlmir_core::unet::{AttentionVariant, UNetConfig};
use vlmir_core::CoreError;
use vlmir_data::{
    build_corpus, generate_toy_scenes, DatasetManifest, DegradationLabel, ImageTensor, Split, SynthParams, TaskMixing,
};

fn stage1() -> Stage1Model {
    let cfg = Stage1Config {
        encoder: EncoderConfig {
            embed_dim: 16,
            text_layers: 1,
            text_width: 16,
            text_heads: 2,
            context_length: 16,
            vocab_size: 256,
            image_patch: 8,
            image_size: 16,
            image_layers: 1,
            image_width: 16,
            image_heads: 2,
            predictor_channels: 4,
        },
        lora: LoraConfig {
            rank: 2,
            ..Default::default()
        },
        ..Default::default()
    };
    let model = Stage1Model::new(&cfg, 1, DType::F32).unwrap();
    // Untrained adapters and predictor heads give near-constant embeddings.
    model
        .store()
        .randomize(|n| !model.store().is_frozen(n), 0.2, 2)
        .unwrap();
    model
}

fn config() -> Stage2Config {
    Stage2Config {
        unet: UNetConfig {
            base_channels: 8,
            channel_mults: vec![1, 2],
            attn_levels: vec![1],
            num_res_blocks: 1,
            cond_dim: 16,
            num_heads: 2,
            prompt_len: 2,
            groups: 4,
            variant: AttentionVariant::Both,
        },
        steps: 6,
        batch_size: 2,
        patch_size: 16,
        lr: 1e-2,
        checkpoint_every: 2,
        keep_checkpoints: 5,
        ..Default::default()
    }
}

fn manifest(dir: &Path) -> DatasetManifest {
    generate_toy_scenes(dir.join("gt"), "r", 3, 16, 5).unwrap();
    let mut m = build_corpus(
        dir.join("gt"),
        &DegradationLabel::ALL,
        &SynthParams::default(),
        dir.join("corpus"),
        Split::Train,
        TaskMixing::Uniform,
    )
    .unwrap();
    for r in &mut m.records {
        r.lq_caption = Some(format!("a {} photo", r.degradation));
    }
    m
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

fn checkpoint_names(run: &Path) -> Vec<String> {
    let mut names: Vec<_> = std::fs::read_dir(run.join(CHECKPOINTS_DIR))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
}

#[test]
fn training_is_deterministic_and_resumable() {
    let tmp = tempfile::tempdir().unwrap();
    let m = manifest(tmp.path());
    let s1 = stage1();
    let cfg = config();
    let a = train_stage2(&m, &s1, &cfg, 4, &tmp.path().join("a"), None).unwrap();
    let b = train_stage2(&m, &s1, &cfg, 4, &tmp.path().join("b"), None).unwrap();
    assert_eq!(a.history.len(), 6);
    assert!(a.history.iter().all(|r| r.loss.is_finite()));
    assert_eq!(read(&a.log_path), read(&b.log_path));
    assert_eq!(
        read(a.model_dir.join("weights.bin")),
        read(b.model_dir.join("weights.bin"))
    );
    assert_eq!(
        checkpoint_names(&tmp.path().join("a")),
        ["step_0000002", "step_0000004", "step_0000006"]
    );

    let ckpt = tmp.path().join("a").join(CHECKPOINTS_DIR).join("step_0000002");
    let r = train_stage2(&m, &s1, &cfg, 4, &tmp.path().join("c"), Some(&ckpt)).unwrap();
    assert_eq!(r.history, a.history[2..]);
    assert_eq!(
        read(a.model_dir.join("weights.bin")),
        read(r.model_dir.join("weights.bin"))
    );
}

#[test]
fn old_step_checkpoints_are_pruned() {
    let tmp = tempfile::tempdir().unwrap();
    let m = manifest(tmp.path());
    let cfg = Stage2Config {
        keep_checkpoints: 1,
        ..config()
    };
    train_stage2(&m, &stage1(), &cfg, 0, &tmp.path().join("run"), None).unwrap();
    assert_eq!(checkpoint_names(&tmp.path().join("run")), ["step_0000006"]);
}

#[test]
fn mismatched_embedding_width_is_incompatible() {
    let tmp = tempfile::tempdir().unwrap();
    let m = manifest(tmp.path());
    let mut cfg = config();
    cfg.unet.cond_dim = 32;
    let err = train_stage2(&m, &stage1(), &cfg, 0, &tmp.path().join("run"), None).unwrap_err();
    assert!(matches!(err, CoreError::Incompatible(_)), "{err}");
    assert!(!tmp.path().join("run").join(MODEL_DIR).exists());
}

#[test]
fn resume_with_a_different_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let m = manifest(tmp.path());
    let s1 = stage1();
    train_stage2(&m, &s1, &config(), 0, &tmp.path().join("a"), None).unwrap();
    let ckpt = tmp.path().join("a").join(CHECKPOINTS_DIR).join("step_0000002");
    let cfg = Stage2Config { lr: 5e-3, ..config() };
    let err = train_stage2(&m, &s1, &cfg, 0, &tmp.path().join("b"), Some(&ckpt)).unwrap_err();
    assert!(matches!(err, CoreError::Incompatible(_)), "{err}");
}

#[test]
fn stage1_stays_frozen() {
    let tmp = tempfile::tempdir().unwrap();
    let m = manifest(tmp.path());
    let s1 = stage1();
    let dir = tmp.path().join("s1");
    s1.to_checkpoint(1, 0, 0).unwrap().save(&dir).unwrap();
    let before = read(dir.join("weights.bin"));
    train_stage2(&m, &s1, &config(), 0, &tmp.path().join("run"), None).unwrap();
    s1.to_checkpoint(1, 0, 0).unwrap().save(&dir).unwrap();
    assert_eq!(before, read(dir.join("weights.bin")));
}

#[test]
fn trained_model_responds_to_conditioning() {
    let tmp = tempfile::tempdir().unwrap();
    let m = manifest(tmp.path());
    let s1 = stage1();
    let cfg = config();
    let report = train_stage2(&m, &s1, &cfg, 0, &tmp.path().join("run"), None).unwrap();
    let model = Stage2Model::load(&report.model_dir).unwrap();
    let bundles = precompute_bundles(&s1, &m, TextMode::Caption, true).unwrap();
    let labels = s1.degradation_text_embeddings(&DegradationLabel::ALL).unwrap();
    let a = &bundles[0];
    let other = DegradationLabel::ALL
        .into_iter()
        .find(|&l| labels[&l] != a.degradation_embed)
        .unwrap();
    let b = &a.clone().with_label(other, &labels);

    let lq = ImageTensor::load_png(m.lq_path(&m.records[0])).unwrap();
    let dev = model.store().device().clone();
    let x = images_to_tensor(&[&lq, &lq], &dev, DType::F32).unwrap();
    let cond = model.unet().cond_batch(&[a, b], DType::F32).unwrap();
    let out = model.unet().forward(&x, &x, &[50, 50], &cond).unwrap();
    let diff = (out.get(0).unwrap() - out.get(1).unwrap())
        .unwrap()
        .abs()
        .unwrap()
        .max_all()
        .unwrap()
        .to_scalar::<f32>()
        .unwrap();
    assert!(diff > 0.0);
}

#[test]
fn restoration_does_not_depend_on_batching() {
    let tmp = tempfile::tempdir().unwrap();
    let m = manifest(tmp.path());
    let s1 = stage1();
    let cfg = Stage2Config {
        steps: 2,
        schedule: vlmir_core::schedule::ScheduleConfig {
            steps: 8,
            ..Default::default()
        },
        ..config()
    };
    let report = train_stage2(&m, &s1, &cfg, 0, &tmp.path().join("run"), None).unwrap();
    let model = Stage2Model::load(&report.model_dir).unwrap();
    let bundles = precompute_bundles(&s1, &m, TextMode::Caption, true).unwrap();
    let lqs: Vec<_> = m
        .records
        .iter()
        .take(3)
        .map(|r| ImageTensor::load_png(m.lq_path(r)).unwrap())
        .collect();
    let seeds = [11, 12, 13];
    for sampler in [Sampler::Mean, Sampler::Ancestral] {
        let batched = restore_batch(
            &model,
            &lqs.iter().collect::<Vec<_>>(),
            &bundles[..3].iter().collect::<Vec<_>>(),
            &seeds,
            sampler,
            None,
        )
        .unwrap();
        for i in 0..3 {
            let single = restore_batch(&model, &[&lqs[i]], &[&bundles[i]], &[seeds[i]], sampler, None).unwrap();
            let a = batched[i].as_array();
            let b = single[0].as_array();
            let d = a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            assert!(d < 1e-5, "{sampler:?} item {i}: {d}");
        }
        let again = restore_batch(
            &model,
            &lqs.iter().collect::<Vec<_>>(),
            &bundles[..3].iter().collect::<Vec<_>>(),
            &seeds,
            sampler,
            None,
        )
        .unwrap();
        assert_eq!(batched, again);
    }
}
