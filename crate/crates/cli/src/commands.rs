//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use log::info;
use serde_json::json;
use vlmir_captions::{caption_manifest, CaptionCache, CaptionProvider, MockCaptioner, RemoteCaptioner};
use vlmir_core::checkpoint::MANIFEST_FILE as CHECKPOINT_MANIFEST;
use vlmir_core::stage1::{train_stage1 as fit_stage1, Stage1Model, TextMode, MODEL_DIR};
use vlmir_core::stage2::{restore_batch, train_stage2 as fit_stage2, Sampler, SamplerTrace, Stage2Model};
use vlmir_core::unet::AttentionVariant;
use vlmir_data::{
    build_corpus, derive_seed, generate_toy_scenes, DatasetManifest, DegradationLabel, ImageTensor, Split,
};
use vlmir_eval::{emit_table, evaluate_dataset, MetricReport, ReportMetadata, TableFormat};

use crate::config::{ProviderKind, RunConfig};
use crate::{rundir, Common, UsageError};

pub const RESTORED_DIR: &str = "restored";
pub const REPORT_FILE: &str = "report.json";
const DEFAULT_RESTORE_BATCH: usize = 8;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Loads the config and creates the run directory.
fn start(common: &Common, command: &str, invocation: serde_json::Value) -> Result<(RunConfig, PathBuf)> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let out = common.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    let dir = rundir::create(&out, command, &cfg, &invocation)?;
    info!("run directory: {}", dir.display());
    Ok((cfg, dir))
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::load(path).with_context(|| format!("loading manifest {}", path.display()))?;
    manifest
        .validate()
        .with_context(|| format!("validating manifest {}", path.display()))?;
    Ok(manifest)
}

/// Accepts a checkpoint directory or a run directory holding `model/`.
fn checkpoint_dir(path: &Path) -> PathBuf {
    if !path.join(CHECKPOINT_MANIFEST).is_file() && path.join(MODEL_DIR).join(CHECKPOINT_MANIFEST).is_file() {
        path.join(MODEL_DIR)
    } else {
        path.to_path_buf()
    }
}

fn load_stage1(path: &Path) -> Result<Stage1Model> {
    let dir = checkpoint_dir(path);
    Stage1Model::load(&dir).with_context(|| format!("loading stage-1 checkpoint {}", dir.display()))
}

fn load_stage2(path: &Path) -> Result<Stage2Model> {
    let dir = checkpoint_dir(path);
    Stage2Model::load(&dir).with_context(|| format!("loading stage-2 checkpoint {}", dir.display()))
}

pub fn synth(common: &Common, tasks: &str, gt_dir: Option<&Path>, split: &str, count: Option<usize>) -> Result<()> {
    let tasks = DegradationLabel::parse_list(tasks).map_err(|e| usage(e.to_string()))?;
    let split: Split = split.parse().map_err(|e: vlmir_data::DataError| usage(e.to_string()))?;
    if count == Some(0) {
        bail!(usage("--count must be positive"));
    }
    let (cfg, run) = start(
        common,
        "synth",
        json!({"tasks": tasks, "gt_dir": gt_dir, "split": split, "count": count}),
    )?;
    let gt = match gt_dir {
        Some(d) => d.to_path_buf(),
        None => {
            let d = run.join("gt_src");
            let n = count.unwrap_or(cfg.synth.toy_count);
            generate_toy_scenes(
                &d,
                &split.to_string(),
                n,
                cfg.synth.toy_size,
                derive_seed(cfg.seed, &format!("scenes/{split}")),
            )?;
            d
        }
    };
    let mut params = cfg.synth.params.clone();
    params.seed = derive_seed(cfg.seed, &format!("synth/{split}/{}", cfg.synth.params.seed));
    let manifest = build_corpus(&gt, &tasks, &params, &run, split, cfg.synth.mixing)?;
    info!("{} records", manifest.records.len());
    println!("{}", run.join(vlmir_data::corpus::MANIFEST_FILE).display());
    Ok(())
}

pub fn caption(
    common: &Common,
    manifest_path: &Path,
    provider: Option<ProviderKind>,
    endpoint: Option<String>,
) -> Result<()> {
    let (cfg, run) = start(
        common,
        "caption",
        json!({"manifest": manifest_path, "provider": provider.map(|p| format!("{p:?}")), "endpoint": endpoint}),
    )?;
    let mut manifest = load_manifest(manifest_path)?;
    let kind = provider.unwrap_or(cfg.caption.provider);
    let provider: Box<dyn CaptionProvider> = match kind {
        ProviderKind::Mock => Box::new(MockCaptioner::new(cfg.caption.corruption_rate, cfg.seed)),
        ProviderKind::Remote => {
            let endpoint = endpoint
                .or_else(|| cfg.caption.endpoint.clone())
                .ok_or_else(|| usage("the remote provider needs --endpoint or caption.endpoint"))?;
            Box::new(RemoteCaptioner::new(
                &endpoint,
                Duration::from_secs_f64(cfg.caption.timeout_secs),
                cfg.caption.retries,
            ))
        }
    };
    let cache_path = cfg
        .caption
        .cache
        .clone()
        .unwrap_or_else(|| manifest.base_dir().join("captions.jsonl"));
    let mut cache = CaptionCache::open(&cache_path)?;
    let stats = caption_manifest(&mut manifest, provider.as_ref(), &mut cache)?;
    manifest.save(manifest_path)?;
    let summary = json!({
        "manifest": manifest_path,
        "cache": cache_path,
        "records": manifest.records.len(),
        "provider_calls": stats.provider_calls,
        "cache_hits": stats.cache_hits,
        "skipped_cache_lines": cache.skipped(),
    });
    std::fs::write(
        run.join("caption_stats.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    info!(
        "{} provider calls, {} cache hits",
        stats.provider_calls, stats.cache_hits
    );
    println!("{}", manifest_path.display());
    Ok(())
}

pub fn train_stage1(common: &Common, manifest_path: &Path, resume: Option<&Path>) -> Result<()> {
    let (cfg, run) = start(
        common,
        "train-stage1",
        json!({"manifest": manifest_path, "resume": resume}),
    )?;
    let manifest = load_manifest(manifest_path)?;
    let report = fit_stage1(&manifest, &cfg.stage1, cfg.seed, &run, resume)?;
    info!(
        "stage 1 finished after {} steps, final total loss {:.4}",
        report.total_steps,
        report.history.last().map_or(f64::NAN, |r| r.total)
    );
    println!("{}", report.model_dir.display());
    Ok(())
}

pub fn train_stage2(
    common: &Common,
    manifest_path: &Path,
    stage1: &Path,
    variant: Option<AttentionVariant>,
    resume: Option<&Path>,
) -> Result<()> {
    let (mut cfg, run) = start(
        common,
        "train-stage2",
        json!({"manifest": manifest_path, "stage1": stage1, "variant": variant, "resume": resume}),
    )?;
    if let Some(v) = variant {
        cfg.stage2.unet.variant = v;
    }
    let manifest = load_manifest(manifest_path)?;
    let stage1 = load_stage1(stage1)?;
    let report = fit_stage2(&manifest, &stage1, &cfg.stage2, cfg.seed, &run, resume)?;
    info!(
        "stage 2 finished after {} steps, final loss {:.5}",
        report.total_steps,
        report.history.last().map_or(f64::NAN, |r| r.loss)
    );
    println!("{}", report.model_dir.display());
    Ok(())
}

pub struct RestoreArgs {
    pub stage1: PathBuf,
    pub stage2: PathBuf,
    pub input: PathBuf,
    pub captions: Option<PathBuf>,
    pub text_mode: Option<TextMode>,
    pub sampler: Option<Sampler>,
    pub trace: bool,
}

struct RestoreItem {
    name: String,
    image: ImageTensor,
    caption: Option<String>,
}

/// Stem → LQ caption, from a manifest (keyed by record id and LQ file stem)
/// or a plain JSON object.
fn load_captions(path: &Path) -> Result<BTreeMap<String, String>> {
    if let Ok(manifest) = DatasetManifest::load(path) {
        let mut map = BTreeMap::new();
        for r in &manifest.records {
            if let Some(c) = &r.lq_caption {
                if let Some(stem) = r.lq_path.file_stem().and_then(|s| s.to_str()) {
                    map.insert(stem.to_string(), c.clone());
                }
                map.insert(r.id.clone(), c.clone());
            }
        }
        return Ok(map);
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading captions {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| {
        usage(format!(
            "{} is neither a manifest nor a JSON object of captions: {e}",
            path.display()
        ))
    })
}

fn list_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        bail!(usage(format!("input {} does not exist", input.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!(usage(format!("no PNG files in {}", input.display())));
    }
    Ok(files)
}

/// Restores `items` into `out_dir/{name}.png` and returns the predicted
/// degradation label of each.
#[allow(clippy::too_many_arguments)]
fn restore_items(
    stage1: &Stage1Model,
    stage2: &Stage2Model,
    items: &[RestoreItem],
    mode: TextMode,
    sampler: Sampler,
    seed: u64,
    batch: usize,
    out_dir: &Path,
    trace_dir: Option<&Path>,
) -> Result<BTreeMap<String, DegradationLabel>> {
    stage2.check_stage1(stage1)?;
    std::fs::create_dir_all(out_dir)?;
    let labels = stage1.degradation_text_embeddings(&DegradationLabel::ALL)?;
    let mut bundles = Vec::with_capacity(items.len());
    for item in items {
        let caption = match (mode, &item.caption) {
            (TextMode::Caption, None) => bail!(usage(format!(
                "no caption for `{}`; pass --captions or use --text-mode fixed|null",
                item.name
            ))),
            (_, c) => c.as_deref().unwrap_or_default(),
        };
        bundles.push(stage1.export_with_labels(&item.image, caption, mode, &labels)?);
    }
    // Batch images of equal size, keeping input order within each size.
    let mut by_size: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        by_size.entry(item.image.dims()).or_default().push(i);
    }
    let batch = if trace_dir.is_some() { 1 } else { batch.max(1) };
    for idx in by_size.values() {
        for chunk in idx.chunks(batch) {
            let lqs: Vec<&ImageTensor> = chunk.iter().map(|&i| &items[i].image).collect();
            let bs: Vec<_> = chunk.iter().map(|&i| &bundles[i]).collect();
            let seeds: Vec<u64> = chunk
                .iter()
                .map(|&i| derive_seed(seed, &format!("restore/{}", items[i].name)))
                .collect();
            let mut trace = trace_dir.map(|_| SamplerTrace::new(json!({"kind": "sampler_trace"})));
            let restored = restore_batch(stage2, &lqs, &bs, &seeds, sampler, trace.as_mut())?;
            for (&i, img) in chunk.iter().zip(&restored) {
                img.save_png(out_dir.join(format!("{}.png", items[i].name)))?;
            }
            if let (Some(dir), Some(tr)) = (trace_dir, trace) {
                tr.save(dir.join(&items[chunk[0]].name))?;
            }
            info!("restored {} image(s)", chunk.len());
        }
    }
    Ok(items
        .iter()
        .zip(&bundles)
        .map(|(it, b)| (it.name.clone(), b.predicted_label))
        .collect())
}

pub fn restore(common: &Common, args: &RestoreArgs) -> Result<()> {
    let (cfg, run) = start(
        common,
        "restore",
        json!({
            "stage1": args.stage1,
            "stage2": args.stage2,
            "input": args.input,
            "captions": args.captions,
            "text_mode": args.text_mode,
            "sampler": args.sampler,
            "trace": args.trace,
        }),
    )?;
    let stage1 = load_stage1(&args.stage1)?;
    let stage2 = load_stage2(&args.stage2)?;
    if common.config.is_some() {
        stage2.check_schedule(&cfg.stage2.schedule)?;
    }
    let mode = args
        .text_mode
        .or(cfg.restore.text_mode)
        .unwrap_or(stage2.config().text_mode);
    let sampler = args.sampler.unwrap_or(cfg.restore.sampler);
    let captions = args
        .captions
        .as_deref()
        .map(load_captions)
        .transpose()?
        .unwrap_or_default();
    let items = list_inputs(&args.input)?
        .into_iter()
        .map(|p| {
            let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
            Ok(RestoreItem {
                image: ImageTensor::load_png(&p)?,
                caption: captions.get(&name).cloned(),
                name,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let out_dir = run.join(RESTORED_DIR);
    let trace_dir = args.trace.then(|| run.join("traces"));
    let predicted = restore_items(
        &stage1,
        &stage2,
        &items,
        mode,
        sampler,
        cfg.seed,
        cfg.restore.batch_size.unwrap_or(DEFAULT_RESTORE_BATCH),
        &out_dir,
        trace_dir.as_deref(),
    )?;
    std::fs::write(
        run.join("predicted_labels.json"),
        serde_json::to_string_pretty(&predicted)? + "\n",
    )?;
    println!("{}", out_dir.display());
    Ok(())
}

fn write_tables(dir: &Path, name: &str, reports: &[MetricReport]) -> Result<String> {
    let text = emit_table(reports, TableFormat::Text)?;
    std::fs::write(dir.join(format!("{name}.csv")), emit_table(reports, TableFormat::Csv)?)?;
    std::fs::write(dir.join(format!("{name}.txt")), &text)?;
    Ok(text)
}

pub fn eval(common: &Common, manifest_path: &Path, restored: &Path, report: Option<&Path>, label: &str) -> Result<()> {
    let (cfg, run) = start(
        common,
        "eval",
        json!({"manifest": manifest_path, "restored": restored, "report": report, "label": label}),
    )?;
    let manifest = load_manifest(manifest_path)?;
    let mut meta = ReportMetadata::new();
    meta.task = Some(
        manifest
            .metadata
            .tasks
            .iter()
            .map(|t| t.as_str())
            .collect::<Vec<_>>()
            .join(","),
    );
    meta.seed = Some(cfg.seed);
    meta.extra.insert("restored".into(), restored.display().to_string());
    let result = evaluate_dataset(label, &manifest, restored, &[], meta)?;
    let path = report.map_or_else(|| run.join(REPORT_FILE), Path::to_path_buf);
    result.save(&path)?;
    let text = write_tables(&run, "table", std::slice::from_ref(&result))?;
    print!("{text}");
    println!("{}", path.display());
    Ok(())
}

fn variant_label(v: AttentionVariant) -> &'static str {
    match v {
        AttentionVariant::Sca => "SCA",
        AttentionVariant::Ica => "ICA",
        AttentionVariant::Both => "SCA&ICA",
    }
}

fn text_label(m: TextMode) -> &'static str {
    match m {
        TextMode::Caption => "LQ caption",
        TextMode::Fixed => "fixed prompt",
        TextMode::Null => "no text",
    }
}

/// Whether `a` beats `b` on PSNR, as a sentence for the orderings file.
fn ordering(a: &MetricReport, b: &MetricReport) -> String {
    let (pa, pb) = (a.value("psnr").unwrap_or(f64::NAN), b.value("psnr").unwrap_or(f64::NAN));
    format!(
        "{} vs {}: psnr {:.4} vs {:.4} ({})",
        a.label,
        b.label,
        pa,
        pb,
        if pa > pb {
            "first is better"
        } else {
            "first is not better"
        }
    )
}

pub fn ablate(common: &Common, manifest_path: &Path, test_manifest: Option<&Path>, stage1_path: &Path) -> Result<()> {
    let (cfg, run) = start(
        common,
        "ablate",
        json!({"manifest": manifest_path, "test_manifest": test_manifest, "stage1": stage1_path}),
    )?;
    let train = load_manifest(manifest_path)?;
    let test = load_manifest(test_manifest.unwrap_or(manifest_path))?;
    let stage1 = load_stage1(stage1_path)?;
    let items: Vec<RestoreItem> = test
        .records
        .iter()
        .map(|r| {
            Ok(RestoreItem {
                name: r.id.clone(),
                image: ImageTensor::load_png(test.lq_path(r))?,
                caption: r.lq_caption.clone(),
            })
        })
        .collect::<Result<_>>()?;

    let module_axis = [AttentionVariant::Sca, AttentionVariant::Ica, AttentionVariant::Both];
    let text_axis = [TextMode::Caption, TextMode::Fixed, TextMode::Null];
    let variants = module_axis
        .iter()
        .map(|&v| ("module", v, TextMode::Caption, variant_label(v)))
        .chain(
            text_axis
                .iter()
                .map(|&m| ("text", AttentionVariant::Both, m, text_label(m))),
        );

    let mut module_rows = Vec::new();
    let mut text_rows = Vec::new();
    for (axis, variant, mode, label) in variants {
        let dir = run.join(axis).join(format!("{variant}_{mode}"));
        let mut s2 = cfg.stage2.clone();
        s2.unet.variant = variant;
        s2.text_mode = mode;
        if let Some(steps) = cfg.ablate.steps {
            s2.steps = steps;
        }
        info!("ablation: training variant {variant} with text mode {mode}");
        let trained = fit_stage2(&train, &stage1, &s2, cfg.seed, &dir, None)?;
        let stage2 = Stage2Model::load(&trained.model_dir)?;
        let restored = dir.join(RESTORED_DIR);
        restore_items(
            &stage1,
            &stage2,
            &items,
            mode,
            cfg.restore.sampler,
            cfg.seed,
            cfg.restore.batch_size.unwrap_or(DEFAULT_RESTORE_BATCH),
            &restored,
            None,
        )?;
        let mut meta = ReportMetadata::new();
        meta.seed = Some(cfg.seed);
        // Relative to the ablation run directory.
        let model = trained.model_dir.strip_prefix(&run).unwrap_or(&trained.model_dir);
        meta.checkpoints.push(model.display().to_string());
        meta.extra.insert("variant".into(), variant.to_string());
        meta.extra.insert("text_mode".into(), mode.to_string());
        let report = evaluate_dataset(label, &test, &restored, &[], meta)?;
        report.save(dir.join(REPORT_FILE))?;
        if axis == "module" {
            module_rows.push(report);
        } else {
            text_rows.push(report);
        }
    }

    let module_text = write_tables(&run, "module_variants", &module_rows)?;
    let text_text = write_tables(&run, "text_variants", &text_rows)?;
    let orderings = [
        ordering(&module_rows[2], &module_rows[0]),
        ordering(&module_rows[2], &module_rows[1]),
        ordering(&text_rows[0], &text_rows[1]),
        ordering(&text_rows[0], &text_rows[2]),
    ]
    .join("\n");
    std::fs::write(run.join("orderings.txt"), orderings.clone() + "\n")?;
    println!("module variants (text input: LQ caption)\n{module_text}");
    println!("text variants (module variant: SCA&ICA)\n{text_text}");
    println!("orderings (reported, not asserted)\n{orderings}");
    println!("{}", run.display());
    Ok(())
}
