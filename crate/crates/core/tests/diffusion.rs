use candle_core::{DType, Device, Tensor, D};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlmir_core::embedding::{Embedding, EmbeddingKind};
use vlmir_core::schedule::{NoiseSchedule, ScheduleConfig};
use vlmir_core::stage1::{ConditioningBundle, TextTokens};
use vlmir_core::stage2::{
    gaussian, sample, training_loss, ConditionedUNet, LossNorm, NoisePredictor, Sampler, Stage2Config,
};
use vlmir_core::unet::{AttentionVariant, IcaBlock, ScaBlock, UNet, UNetConfig};
use vlmir_core::{CoreError, ParamStore};
use vlmir_data::DegradationLabel;

/// Central differences in f64 carry roundoff of about 1e-16·|loss|/h, so
/// relative errors are measured against at least this magnitude.
const FD_FLOOR: f64 = 1e-7;

fn tiny_unet() -> UNetConfig {
    UNetConfig {
        base_channels: 8,
        channel_mults: vec![1, 2],
        attn_levels: vec![0, 1],
        num_res_blocks: 1,
        cond_dim: 16,
        num_heads: 2,
        prompt_len: 2,
        groups: 4,
        variant: AttentionVariant::Both,
    }
}

fn unit(rng: &mut ChaCha8Rng, d: usize, kind: EmbeddingKind) -> Embedding {
    let v: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    vlmir_core::embedding::normalize_embedding(&v, kind).unwrap()
}

fn bundle(seed: u64, d: usize, text_len: Option<usize>) -> ConditioningBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let text_tokens = text_len.map(|len| TextTokens {
        features: (0..len * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        len,
        dim: d,
        valid: len.min(3),
    });
    ConditioningBundle {
        text_tokens,
        image_embed: unit(&mut rng, d, EmbeddingKind::ImageContent),
        degradation_embed: unit(&mut rng, d, EmbeddingKind::DegradationText),
        predicted_label: DegradationLabel::Noise,
    }
}

fn rand_tensor(seed: u64, shape: &[usize], dtype: DType) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu)
        .unwrap()
        .to_dtype(dtype)
        .unwrap()
}

fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    (a - b)
        .unwrap()
        .abs()
        .unwrap()
        .flatten_all()
        .unwrap()
        .max(0)
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}

fn schedule() -> NoiseSchedule {
    NoiseSchedule::new(&ScheduleConfig::default()).unwrap()
}

/// Returns the exact noise implied by a known `x0`.
struct Oracle<'a> {
    schedule: &'a NoiseSchedule,
    x0: Tensor,
}

impl NoisePredictor for Oracle<'_> {
    fn predict(&self, x: &Tensor, mu: &Tensor, steps: &[usize]) -> vlmir_core::Result<Tensor> {
        let (mean, std) = self.schedule.forward_marginal(&self.x0, mu, steps[0])?;
        Ok(((x - mean)? / std)?)
    }
}

#[test]
fn marginal_matches_monte_carlo() {
    let s = schedule();
    let n = 10_000;
    let x0 = Tensor::full(0.8f64, (n, 1), &Device::Cpu).unwrap();
    let mu = Tensor::full(0.3f64, (n, 1), &Device::Cpu).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in [1, 10, 37, 70, 100] {
        let eps = gaussian(&mut rng, &[n, 1], &Device::Cpu, DType::F64).unwrap();
        let x = s.forward_sample(&x0, &mu, i, &eps).unwrap();
        let v = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let (decay, std) = s.marginal_coefficients(i).unwrap();
        let want_mean = 0.3 + 0.5 * decay;
        let se_mean = std / (n as f64).sqrt();
        // Standard error of the sample std of a normal.
        let se_std = std / (2.0 * (n as f64 - 1.0)).sqrt();
        assert!(
            (mean - want_mean).abs() < 3.0 * se_mean,
            "i={i}: mean {mean} vs {want_mean}"
        );
        assert!(
            (var.sqrt() - std).abs() < 3.0 * se_std,
            "i={i}: std {} vs {std}",
            var.sqrt()
        );
    }
}

#[test]
fn terminal_state_is_near_stationary() {
    let s = schedule();
    let n = 20_000;
    let x0 = rand_tensor(1, &[n, 1], DType::F64);
    let mu = rand_tensor(2, &[n, 1], DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let eps = gaussian(&mut rng, &[n, 1], &Device::Cpu, DType::F64).unwrap();
    let x = s.forward_sample(&x0, &mu, s.steps(), &eps).unwrap();
    let d = (x - &mu).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let m = d.iter().sum::<f64>() / n as f64;
    let std = (d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    assert!((std / s.lambda() - 1.0).abs() < 0.05, "std {std}");
}

#[test]
fn zero_noise_gives_the_mean_and_step_zero_is_clean() {
    let s = schedule();
    let x0 = rand_tensor(4, &[2, 3, 4, 4], DType::F64);
    let mu = rand_tensor(5, &[2, 3, 4, 4], DType::F64);
    let zeros = x0.zeros_like().unwrap();
    let (mean, _) = s.forward_marginal(&x0, &mu, 40).unwrap();
    assert_eq!(max_abs(&s.forward_sample(&x0, &mu, 40, &zeros).unwrap(), &mean), 0.0);
    let eps = rand_tensor(6, &[2, 3, 4, 4], DType::F64);
    assert!(max_abs(&s.forward_sample(&x0, &mu, 0, &eps).unwrap(), &x0) < 1e-15);
}

#[test]
fn first_reverse_step_returns_x0() {
    let s = schedule();
    let x0 = rand_tensor(7, &[1, 3, 5, 5], DType::F64);
    let mu = rand_tensor(8, &[1, 3, 5, 5], DType::F64);
    let x1 = rand_tensor(9, &[1, 3, 5, 5], DType::F64);
    assert!(max_abs(&s.optimal_reverse_state(&x1, &x0, &mu, 1).unwrap(), &x0) < 1e-12);
    assert_eq!(s.posterior_std(1).unwrap(), 0.0);
}

#[test]
fn stationary_case_stays_at_mu() {
    let s = schedule();
    let mu = rand_tensor(10, &[1, 3, 4, 4], DType::F64);
    for i in [2, 50, 100] {
        let (mean, _) = s.forward_marginal(&mu, &mu, i).unwrap();
        assert!(max_abs(&s.optimal_reverse_state(&mean, &mu, &mu, i).unwrap(), &mu) < 1e-12);
    }
}

#[test]
fn reverse_recursion_recovers_x0() {
    let s = schedule();
    let shape = [2, 3, 8, 8];
    let x0 = rand_tensor(12, &shape, DType::F64);
    let mu = rand_tensor(13, &shape, DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let eps = gaussian(&mut rng, &shape, &Device::Cpu, DType::F64).unwrap();
    let mut x = s.forward_sample(&x0, &mu, s.steps(), &eps).unwrap();
    for i in (1..=s.steps()).rev() {
        x = s.optimal_reverse_state(&x, &x0, &mu, i).unwrap();
    }
    assert!(max_abs(&x, &x0) < 1e-4);
}

#[test]
fn oracle_sampler_recovers_ground_truth() {
    let s = schedule();
    let shape = [3, 3, 8, 8];
    let x0 = rand_tensor(15, &shape, DType::F32);
    let mu = rand_tensor(16, &shape, DType::F32);
    let oracle = Oracle {
        schedule: &s,
        x0: x0.clone(),
    };
    for sampler in [Sampler::Mean, Sampler::Ancestral] {
        let out = sample(&s, &oracle, &mu, &[1, 2, 3], sampler, None).unwrap();
        assert!(max_abs(&out, &x0) < 1e-3, "{sampler:?}");
    }
}

#[test]
fn sampler_rows_do_not_depend_on_batching() {
    let s = schedule();
    let mu = rand_tensor(18, &[2, 3, 4, 4], DType::F32);
    // A deliberately wrong predictor so the noise draws matter.
    struct Half;
    impl NoisePredictor for Half {
        fn predict(&self, x: &Tensor, mu: &Tensor, _: &[usize]) -> vlmir_core::Result<Tensor> {
            Ok(((x - mu)? * 0.5)?)
        }
    }
    let both = sample(&s, &Half, &mu, &[5, 6], Sampler::Ancestral, None).unwrap();
    let second = sample(&s, &Half, &mu.narrow(0, 1, 1).unwrap(), &[6], Sampler::Ancestral, None).unwrap();
    assert_eq!(max_abs(&both.narrow(0, 1, 1).unwrap(), &second), 0.0);
}

#[test]
fn sampler_trace_records_every_state() {
    let s = NoiseSchedule::new(&ScheduleConfig {
        steps: 5,
        ..Default::default()
    })
    .unwrap();
    let mu = rand_tensor(19, &[1, 3, 4, 4], DType::F32);
    let oracle = Oracle {
        schedule: &s,
        x0: mu.clone(),
    };
    let mut trace = vlmir_core::Checkpoint::new(serde_json::json!({}));
    sample(&s, &oracle, &mu, &[0], Sampler::Mean, Some(&mut trace)).unwrap();
    let names: Vec<_> = trace.tensors.keys().cloned().collect();
    assert_eq!(
        names,
        ["state.0", "state.1", "state.2", "state.3", "state.4", "state.5"]
    );
}

#[test]
fn preconditioned_x0_has_bounded_gain() {
    let s = schedule();
    let x = rand_tensor(20, &[2, 3, 4, 4], DType::F64);
    let mu = rand_tensor(21, &[2, 3, 4, 4], DType::F64);
    let raw = rand_tensor(22, &[2, 3, 4, 4], DType::F64);
    for i in [1, 30, 100] {
        let steps = [i, i];
        let eps = s.precondition_batch(&x, &mu, &raw, &steps).unwrap();
        let x0 = s.predict_x0_batch(&x, &mu, &eps, &steps).unwrap();
        let (decay, sigma) = s.marginal_coefficients(i).unwrap();
        let want = ((((&x - &mu).unwrap() * decay).unwrap() + &mu).unwrap() - (&raw * sigma).unwrap()).unwrap();
        assert!(max_abs(&x0, &want) < 1e-10, "i={i}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_invariants(steps in 2usize..300, lambda in 0.01f64..2.0, decay_exp in 1.0f64..8.0) {
        let s = NoiseSchedule::new(&ScheduleConfig { steps, lambda, terminal_decay: 10f64.powf(-decay_exp) }).unwrap();
        prop_assert_eq!(s.theta_bar(0), 0.0);
        for i in 1..=steps {
            prop_assert!(s.theta_bar(i) > s.theta_bar(i - 1));
            prop_assert!(s.sigma_bar(i) >= s.sigma_bar(i - 1));
            prop_assert!(s.sigma_bar(i) <= lambda * (1.0 + 1e-12));
            let (c_x, c_0) = s.reverse_coefficients(i).unwrap();
            // The reverse mean is consistent with the forward decay.
            let lhs = c_x * (-s.theta_bar(i)).exp() + c_0;
            prop_assert!((lhs - (-s.theta_bar(i - 1)).exp()).abs() < 1e-12);
            let std = s.posterior_std(i).unwrap();
            prop_assert!(std >= 0.0 && std <= s.sigma_bar(i) + 1e-12);
        }
        let terminal = (-2.0 * s.theta_bar(steps)).exp();
        prop_assert!((terminal / 10f64.powf(-decay_exp) - 1.0).abs() < 1e-9);
    }
}

fn cond_for(unet: &UNet, bundles: &[ConditioningBundle], dtype: DType) -> vlmir_core::unet::CondBatch {
    let refs: Vec<_> = bundles.iter().collect();
    unet.cond_batch(&refs, dtype).unwrap()
}

#[test]
fn unet_output_matches_input_shape_for_odd_sizes() {
    let cfg = tiny_unet();
    let mut store = ParamStore::new(0, DType::F32);
    let unet = UNet::new(&mut store, "unet", &cfg).unwrap();
    let cond = cond_for(&unet, &[bundle(1, 16, Some(5)), bundle(2, 16, None)], DType::F32);
    for (h, w) in [(13, 11), (8, 8), (5, 9)] {
        let x = rand_tensor(23, &[2, 3, h, w], DType::F32);
        let out = unet.forward(&x, &x, &[3, 80], &cond).unwrap();
        assert_eq!(out.dims(), &[2, 3, h, w]);
    }
}

#[test]
fn conditioning_is_inert_at_init() {
    let cfg = tiny_unet();
    let mut store = ParamStore::new(0, DType::F32);
    let unet = UNet::new(&mut store, "unet", &cfg).unwrap();
    let x = rand_tensor(24, &[1, 3, 8, 8], DType::F32);
    let mu = rand_tensor(25, &[1, 3, 8, 8], DType::F32);
    let outputs: Vec<Vec<f32>> = [bundle(3, 16, Some(6)), bundle(4, 16, Some(2)), bundle(5, 16, None)]
        .into_iter()
        .map(|b| {
            let cond = cond_for(&unet, &[b], DType::F32);
            unet.forward(&x, &mu, &[40], &cond)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1()
                .unwrap()
        })
        .collect();
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn conditioning_matters_once_projections_move() {
    let cfg = tiny_unet();
    let mut store = ParamStore::new(0, DType::F32);
    let unet = UNet::new(&mut store, "unet", &cfg).unwrap();
    store.randomize(|_| true, 0.1, 9).unwrap();
    let x = rand_tensor(26, &[1, 3, 8, 8], DType::F32);
    let a = unet
        .forward(&x, &x, &[40], &cond_for(&unet, &[bundle(6, 16, Some(4))], DType::F32))
        .unwrap();
    let b = unet
        .forward(&x, &x, &[40], &cond_for(&unet, &[bundle(7, 16, Some(4))], DType::F32))
        .unwrap();
    assert!(max_abs(&a, &b) > 0.0);
}

#[test]
fn spatial_attention_precedes_image_attention() {
    let cfg = tiny_unet();
    let mut store = ParamStore::new(0, DType::F32);
    let unet = UNet::new(&mut store, "unet", &cfg).unwrap();
    let layout = unet.attention_layout();
    assert!(!layout.is_empty());
    for (_, blocks) in &layout {
        assert_eq!(blocks, &["sca", "ica"]);
    }
    // Levels 0 and 1 (the deepest, so also the middle block).
    assert!(layout.iter().any(|(n, _)| n.contains("mid")));
    for (variant, want) in [
        (AttentionVariant::Sca, vec!["sca"]),
        (AttentionVariant::Ica, vec!["ica"]),
    ] {
        let mut store = ParamStore::new(0, DType::F32);
        let unet = UNet::new(&mut store, "unet", &UNetConfig { variant, ..tiny_unet() }).unwrap();
        assert!(unet.attention_layout().iter().all(|(_, b)| *b == want));
    }
}

#[test]
fn cross_attention_blocks_start_as_identity() {
    let cfg = tiny_unet();
    let mut store = ParamStore::new(0, DType::F32);
    let sca = ScaBlock::new(&mut store, "sca", 8, &cfg).unwrap();
    let ica = IcaBlock::new(&mut store, "ica", 8, &cfg).unwrap();
    let h = rand_tensor(27, &[2, 8, 4, 4], DType::F32);
    let text = rand_tensor(28, &[2, 5, 16], DType::F32);
    let image = rand_tensor(29, &[2, 1, 16], DType::F32);
    assert_eq!(max_abs(&sca.forward(&h, &text, None).unwrap(), &h), 0.0);
    assert_eq!(max_abs(&ica.forward(&h, &image).unwrap(), &h), 0.0);

    let w = sca.attention_weights(&h, &text, None).unwrap();
    let sums = w.sum(D::Minus1).unwrap();
    assert!(max_abs(&sums, &sums.ones_like().unwrap()) < 1e-5);
    let single = ica.attention_weights(&h, &image).unwrap();
    assert!(max_abs(&single, &single.ones_like().unwrap()) < 1e-6);
}

#[test]
fn modulation_starts_as_identity() {
    use vlmir_core::unet::DegradationModulation;
    let mut store = ParamStore::new(0, DType::F32);
    let m = DegradationModulation::new(&mut store, "mod", 16, 6).unwrap();
    let x = rand_tensor(30, &[3, 6, 5, 5], DType::F32);
    let fused = rand_tensor(31, &[3, 16], DType::F32);
    let y = m.forward(&x, &fused).unwrap();
    assert_eq!(y.dims(), x.dims());
    assert_eq!(max_abs(&y, &x), 0.0);
}

#[test]
fn cond_dim_mismatch_is_rejected() {
    let cfg = tiny_unet();
    let mut store = ParamStore::new(0, DType::F32);
    let unet = UNet::new(&mut store, "unet", &cfg).unwrap();
    let b = bundle(1, 8, Some(3));
    assert!(unet.cond_batch(&[&b], DType::F32).is_err());
}

#[test]
fn invalid_unet_configs_are_rejected() {
    let bad = UNetConfig {
        attn_levels: vec![5],
        ..tiny_unet()
    };
    assert!(matches!(bad.validate(), Err(CoreError::InvalidConfig(_))));
    let bad = UNetConfig {
        num_heads: 3,
        ..tiny_unet()
    };
    assert!(matches!(bad.validate(), Err(CoreError::InvalidConfig(_))));
}

/// Central differences against autodiff for a random ~1% of the entries of
/// every parameter tensor.
#[test]
fn stage2_loss_gradient_matches_finite_differences() {
    let cfg = Stage2Config {
        unet: tiny_unet(),
        ..Default::default()
    };
    let mut store = ParamStore::new(0, DType::F64);
    let unet = UNet::new(&mut store, "unet", &cfg.unet).unwrap();
    store.randomize(|_| true, 0.2, 33).unwrap();
    let s = NoiseSchedule::new(&cfg.schedule).unwrap();
    let bundles = [bundle(40, 16, Some(4)), bundle(41, 16, None)];
    let x0 = rand_tensor(34, &[2, 3, 16, 16], DType::F64);
    let mu = rand_tensor(35, &[2, 3, 16, 16], DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let eps = gaussian(&mut rng, &[2, 3, 16, 16], &Device::Cpu, DType::F64).unwrap();
    let steps = [12, 63];
    // L2 keeps the loss smooth so central differences are meaningful.
    let loss = || {
        let cond = cond_for(&unet, &bundles, DType::F64);
        let net = ConditionedUNet {
            unet: &unet,
            schedule: &s,
            cond: &cond,
        };
        training_loss(&s, &net, &x0, &mu, &steps, &eps, LossNorm::L2).unwrap()
    };
    let grads = loss().backward().unwrap();
    let h = 1e-4;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (name, var) in store.vars() {
        let g = grads
            .get(var.as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap())
            .unwrap_or_else(|| vec![0.0; var.elem_count()]);
        let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let count = (base.len() / 100).max(1);
        for _ in 0..count {
            let j = rng.random_range(0..base.len());
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[j] += delta;
                var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap())
                    .unwrap();
                loss().to_scalar::<f64>().unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            var.set(&Tensor::from_vec(base.clone(), var.dims(), &Device::Cpu).unwrap())
                .unwrap();
            let err = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(FD_FLOOR);
            worst = worst.max(err);
            assert!(err < 1e-3, "{name}[{j}]: autodiff {} vs finite difference {fd}", g[j]);
            checked += 1;
        }
    }
    assert!(checked > 30, "only {checked} entries checked");
    eprintln!("checked {checked} entries, worst relative error {worst:.2e}");
}
