//! Dataset-level evaluation reports.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use vlmir_data::{DatasetManifest, ImageTensor};

use crate::error::{EvalError, Result};
use crate::metrics;

pub const BUILTIN_METRICS: [&str; 4] = ["psnr", "ssim", "y_psnr", "y_ssim"];

/// A metric value that survives JSON round trips even when infinite.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Score(pub f64);

impl Serialize for Score {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            v if v.is_nan() => s.serialize_str("nan"),
            v if v == f64::INFINITY => s.serialize_str("inf"),
            v if v == f64::NEG_INFINITY => s.serialize_str("-inf"),
            v => s.serialize_f64(v),
        }
    }
}

impl<'de> Deserialize<'de> for Score {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct ScoreVisitor;
        impl Visitor<'_> for ScoreVisitor {
            type Value = Score;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a number or one of \"inf\", \"-inf\", \"nan\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Score, E> {
                Ok(Score(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Score, E> {
                Ok(Score(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Score, E> {
                Ok(Score(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Score, E> {
                match v {
                    "inf" => Ok(Score(f64::INFINITY)),
                    "-inf" => Ok(Score(f64::NEG_INFINITY)),
                    "nan" => Ok(Score(f64::NAN)),
                    other => Err(E::invalid_value(de::Unexpected::Str(other), &self)),
                }
            }
        }
        d.deserialize_any(ScoreVisitor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    HigherIsBetter,
    LowerIsBetter,
}

impl Polarity {
    /// Built-in polarity table; `None` for names it does not know.
    pub fn for_name(name: &str) -> Option<Polarity> {
        let n = name.to_ascii_lowercase();
        if BUILTIN_METRICS.contains(&n.as_str()) {
            Some(Polarity::HigherIsBetter)
        } else if n == "lpips" || n == "fid" || n == "loss" || n.ends_with("_loss") {
            Some(Polarity::LowerIsBetter)
        } else {
            None
        }
    }
}

pub struct ImagePair<'a> {
    pub id: &'a str,
    pub restored: &'a ImageTensor,
    pub reference: &'a ImageTensor,
}

pub enum PluginOutput {
    /// One value per input pair, in input order.
    PerImage(Vec<f64>),
    /// A single distribution-level value (FID-like).
    Distribution(f64),
}

/// Extension point for metrics that need external models (LPIPS, FID, ...).
pub trait MetricPlugin: Send + Sync {
    fn name(&self) -> &str;
    fn polarity(&self) -> Polarity;
    fn evaluate(&self, pairs: &[ImagePair<'_>]) -> std::result::Result<PluginOutput, String>;
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    #[serde(default)]
    pub task: Option<String>,
    #[serde(default)]
    pub checkpoints: Vec<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    pub luma: String,
    pub region: String,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

impl ReportMetadata {
    pub fn new() -> Self {
        Self {
            luma: "YCbCr full-range BT.601 (Y = 0.299R + 0.587G + 0.114B, no 16/219 offset)".into(),
            region: "full image, no border crop".into(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Row label when tabulated (method or variant name).
    pub label: String,
    pub metadata: ReportMetadata,
    /// Metric columns in display order.
    pub columns: Vec<String>,
    pub polarity: BTreeMap<String, Polarity>,
    pub per_image: BTreeMap<String, BTreeMap<String, Score>>,
    /// Arithmetic means of the finite per-image values.
    pub aggregate: BTreeMap<String, Score>,
    /// Per metric, how many infinite values were left out of the mean.
    pub infinite_counts: BTreeMap<String, usize>,
    /// Distribution-level plugin values.
    pub distribution: BTreeMap<String, Score>,
    /// Plugins that failed, with their error message.
    pub failed: BTreeMap<String, String>,
}

impl MetricReport {
    /// Column value as shown in tables: the aggregate mean or distribution value.
    pub fn value(&self, column: &str) -> Option<f64> {
        self.aggregate
            .get(column)
            .or_else(|| self.distribution.get(column))
            .map(|s| s.0)
    }

    pub fn metric(&self, id: &str, column: &str) -> Option<f64> {
        self.per_image.get(id)?.get(column).map(|s| s.0)
    }

    /// Recomputes aggregates from `per_image`, skipping infinities.
    pub fn recompute_aggregate(&mut self) {
        self.aggregate.clear();
        self.infinite_counts.clear();
        for col in &self.columns {
            if self.distribution.contains_key(col) || self.failed.contains_key(col) {
                continue;
            }
            let values: Vec<f64> = self
                .per_image
                .values()
                .filter_map(|m| m.get(col))
                .map(|s| s.0)
                .collect();
            if values.is_empty() {
                continue;
            }
            let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
            let infinite = values.len() - finite.len();
            if infinite > 0 {
                self.infinite_counts.insert(col.clone(), infinite);
            }
            let mean = if finite.is_empty() {
                // every value infinite: the mean is that infinity
                values[0]
            } else {
                finite.iter().sum::<f64>() / finite.len() as f64
            };
            self.aggregate.insert(col.clone(), Score(mean));
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn builtin_scores(restored: &ImageTensor, reference: &ImageTensor) -> Result<[f64; 4]> {
    Ok([
        metrics::psnr(restored, reference)?,
        metrics::ssim(restored, reference)?,
        metrics::y_psnr(restored, reference)?,
        metrics::y_ssim(restored, reference)?,
    ])
}

/// Scores already-loaded `(id, restored, reference)` triples.
pub fn evaluate_pairs(
    label: &str,
    pairs: &[ImagePair<'_>],
    plugins: &[&dyn MetricPlugin],
    metadata: ReportMetadata,
) -> Result<MetricReport> {
    let mut columns: Vec<String> = BUILTIN_METRICS.iter().map(|s| s.to_string()).collect();
    let mut polarity: BTreeMap<String, Polarity> =
        columns.iter().map(|c| (c.clone(), Polarity::HigherIsBetter)).collect();
    let mut per_image = BTreeMap::new();
    for pair in pairs {
        let scores = builtin_scores(pair.restored, pair.reference).map_err(|e| EvalError::Record {
            id: pair.id.to_string(),
            source: Box::new(e),
        })?;
        let row: BTreeMap<String, Score> = BUILTIN_METRICS
            .iter()
            .zip(scores)
            .map(|(k, v)| (k.to_string(), Score(v)))
            .collect();
        per_image.insert(pair.id.to_string(), row);
    }

    let mut distribution = BTreeMap::new();
    let mut failed = BTreeMap::new();
    for plugin in plugins {
        let name = plugin.name().to_string();
        columns.push(name.clone());
        polarity.insert(name.clone(), plugin.polarity());
        match plugin.evaluate(pairs) {
            Ok(PluginOutput::PerImage(values)) if values.len() == pairs.len() => {
                for (pair, v) in pairs.iter().zip(values) {
                    per_image
                        .get_mut(pair.id)
                        .expect("row inserted above")
                        .insert(name.clone(), Score(v));
                }
            }
            Ok(PluginOutput::PerImage(values)) => {
                failed.insert(
                    name,
                    format!("returned {} values for {} images", values.len(), pairs.len()),
                );
            }
            Ok(PluginOutput::Distribution(v)) => {
                distribution.insert(name, Score(v));
            }
            Err(msg) => {
                failed.insert(name, msg);
            }
        }
    }

    let mut report = MetricReport {
        label: label.to_string(),
        metadata,
        columns,
        polarity,
        per_image,
        aggregate: BTreeMap::new(),
        infinite_counts: BTreeMap::new(),
        distribution,
        failed,
    };
    report.recompute_aggregate();
    Ok(report)
}

/// Evaluates `restored_dir/{id}.png` against each record's GT image.
///
/// Every record must have a restored image; missing ones are reported
/// together in a single error.
pub fn evaluate_dataset(
    label: &str,
    manifest: &DatasetManifest,
    restored_dir: impl AsRef<Path>,
    plugins: &[&dyn MetricPlugin],
    metadata: ReportMetadata,
) -> Result<MetricReport> {
    let restored_dir = restored_dir.as_ref();
    let missing: Vec<String> = manifest
        .records
        .iter()
        .filter(|r| !restored_dir.join(format!("{}.png", r.id)).is_file())
        .map(|r| r.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingRestored(missing));
    }
    let mut loaded = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let restored = ImageTensor::load_png(restored_dir.join(format!("{}.png", r.id)))?;
        let reference = ImageTensor::load_png(manifest.gt_path(r))?;
        loaded.push((r.id.as_str(), restored, reference));
    }
    let pairs: Vec<ImagePair<'_>> = loaded
        .iter()
        .map(|(id, restored, reference)| ImagePair {
            id,
            restored,
            reference,
        })
        .collect();
    evaluate_pairs(label, &pairs, plugins, metadata)
}
