use std::fmt;
use std::path::PathBuf;

use log::info;
use serde::{Deserialize, Serialize};
use vlmir_data::{DatasetManifest, ImageTensor, ToyScene};

use crate::cache::{CaptionCache, CaptionRecord};
use crate::error::{CaptionError, Result};
use crate::mock::MockCaptioner;
use crate::remote::RemoteCaptioner;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionSource {
    Gt,
    Lq,
}

impl fmt::Display for CaptionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CaptionSource::Gt => "gt",
            CaptionSource::Lq => "lq",
        })
    }
}

pub struct CaptionRequest<'a> {
    pub image_id: &'a str,
    pub image_path: PathBuf,
    pub scene: Option<&'a ToyScene>,
    pub source: CaptionSource,
}

pub trait CaptionProvider {
    fn name(&self) -> &str;
    fn caption(&self, request: &CaptionRequest<'_>) -> Result<String>;
}

impl CaptionProvider for MockCaptioner {
    fn name(&self) -> &str {
        "mock"
    }

    fn caption(&self, request: &CaptionRequest<'_>) -> Result<String> {
        MockCaptioner::caption(self, request.image_id, request.scene, request.source)
    }
}

impl CaptionProvider for RemoteCaptioner {
    fn name(&self) -> &str {
        "remote"
    }

    fn caption(&self, request: &CaptionRequest<'_>) -> Result<String> {
        let image = ImageTensor::load_png(&request.image_path)?;
        RemoteCaptioner::caption(self, &image)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CaptionStats {
    pub cache_hits: usize,
    pub provider_calls: usize,
}

/// Fills `gt_caption` and `lq_caption` of every record, consulting the cache
/// first. GT captions are keyed by the GT file stem, so records sharing a
/// GT image share one provider call; LQ captions are keyed by record id.
///
/// The manifest is only modified once every caption has been obtained.
pub fn caption_manifest(
    manifest: &mut DatasetManifest,
    provider: &dyn CaptionProvider,
    cache: &mut CaptionCache,
) -> Result<CaptionStats> {
    let mut stats = CaptionStats::default();
    let mut filled = Vec::with_capacity(manifest.records.len());
    for record in &manifest.records {
        let gt_key = record
            .gt_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(&record.id)
            .to_string();
        let mut get = |key: &str, path: PathBuf, source: CaptionSource| -> Result<String> {
            if let Some(hit) = cache.get(key, source) {
                stats.cache_hits += 1;
                return Ok(hit.text.clone());
            }
            stats.provider_calls += 1;
            let text = provider.caption(&CaptionRequest {
                image_id: key,
                image_path: path,
                scene: record.scene.as_ref(),
                source,
            })?;
            if text.trim().is_empty() {
                return Err(CaptionError::EmptyCaption);
            }
            cache.put(CaptionRecord::new(key, source, &text, provider.name()))?;
            Ok(text)
        };
        let gt = get(&gt_key, manifest.gt_path(record), CaptionSource::Gt)?;
        let lq = get(&record.id, manifest.lq_path(record), CaptionSource::Lq)?;
        filled.push((gt, lq));
    }
    for (record, (gt, lq)) in manifest.records.iter_mut().zip(filled) {
        record.gt_caption = Some(gt);
        record.lq_caption = Some(lq);
    }
    info!(
        "captioned {} records ({} cache hits, {} provider calls)",
        manifest.records.len(),
        stats.cache_hits,
        stats.provider_calls
    );
    Ok(stats)
}
