//! Corpus construction: toy GT scenes and paired LQ synthesis.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;

use crate::error::{DataError, Result};
use crate::image::ImageTensor;
use crate::label::DegradationLabel;
use crate::manifest::{DatasetManifest, ManifestMetadata, ManifestRecord, Split, TaskMixing};
use crate::scene::ToyScene;
use crate::seed::derive_seed;
use crate::synth::SynthParams;

pub const SCENES_FILE: &str = "scenes.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Renders `count` toy scenes into `out_dir` as `{prefix}_{i:04}.png`, plus a
/// `scenes.json` sidecar holding their caption metadata.
pub fn generate_toy_scenes(
    out_dir: impl AsRef<Path>,
    prefix: &str,
    count: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<ToyScene>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| DataError::io(out_dir, e))?;
    let mut scenes = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("{prefix}_{i:04}");
        let scene = ToyScene::random(id.clone(), derive_seed(seed, &id));
        scene.render(size, size)?.save_png(out_dir.join(format!("{id}.png")))?;
        scenes.push(scene);
    }
    let path = out_dir.join(SCENES_FILE);
    let text = serde_json::to_string_pretty(&scenes).map_err(|e| DataError::json(&path, e))?;
    std::fs::write(&path, text).map_err(|e| DataError::io(&path, e))?;
    Ok(scenes)
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| DataError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| DataError::io(dir, e))?.path();
        if path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.eq_ignore_ascii_case("png"))
            == Some(true)
        {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn load_scenes(gt_dir: &Path) -> Result<BTreeMap<String, ToyScene>> {
    let path = gt_dir.join(SCENES_FILE);
    if !path.is_file() {
        return Ok(BTreeMap::new());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    let scenes: Vec<ToyScene> = serde_json::from_str(&text).map_err(|e| DataError::json(&path, e))?;
    Ok(scenes.into_iter().map(|s| (s.id.clone(), s)).collect())
}

/// Synthesizes one LQ image per (GT image, task) pair and writes a manifest.
///
/// Output layout: `out_dir/gt/{stem}.png`, `out_dir/lq/{stem}_{task}.png`
/// and `out_dir/manifest.json`. Records are interleaved task-by-task within
/// each GT image.
pub fn build_corpus(
    gt_dir: impl AsRef<Path>,
    tasks: &[DegradationLabel],
    params: &SynthParams,
    out_dir: impl AsRef<Path>,
    split: Split,
    mixing: TaskMixing,
) -> Result<DatasetManifest> {
    let (gt_dir, out_dir) = (gt_dir.as_ref(), out_dir.as_ref());
    params.validate()?;
    if tasks.is_empty() {
        return Err(DataError::InvalidParams("no degradation tasks requested".into()));
    }
    let files = list_pngs(gt_dir)?;
    if files.is_empty() {
        return Err(DataError::EmptyInput(gt_dir.to_path_buf()));
    }
    let scenes = load_scenes(gt_dir)?;
    for sub in ["gt", "lq"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| DataError::io(&d, e))?;
    }

    let mut records = Vec::with_capacity(files.len() * tasks.len());
    for file in &files {
        let stem = file
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let gt = ImageTensor::load_png(file)?;
        let gt_rel = PathBuf::from("gt").join(format!("{stem}.png"));
        gt.save_png(out_dir.join(&gt_rel))?;
        for &task in tasks {
            let id = format!("{stem}_{task}");
            let lq = params.degrade(&gt, task, derive_seed(params.seed, &id))?;
            let lq_rel = PathBuf::from("lq").join(format!("{id}.png"));
            lq.save_png(out_dir.join(&lq_rel))?;
            records.push(ManifestRecord {
                id,
                gt_path: gt_rel.clone(),
                lq_path: lq_rel,
                degradation: task,
                gt_caption: None,
                lq_caption: None,
                scene: scenes.get(&stem).cloned(),
            });
        }
    }
    info!("synthesized {} records from {} GT images", records.len(), files.len());

    let metadata = ManifestMetadata {
        tasks: tasks.to_vec(),
        synth: Some(params.clone()),
        seed: params.seed,
        mixing,
    };
    let manifest = DatasetManifest::new(split, metadata, records, out_dir);
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
