//! The TOML run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vlmir_core::stage1::{Stage1Config, TextMode};
use vlmir_core::stage2::{Sampler, Stage2Config};
use vlmir_data::{SynthParams, TaskMixing};

use crate::UsageError;

pub const SEED_ENV: &str = "VLMIR_SEED";
pub const DEVICE_ENV: &str = "VLMIR_DEVICE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Parent of every run directory.
    pub out_dir: PathBuf,
    pub synth: SynthSection,
    pub caption: CaptionSection,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub restore: RestoreSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            synth: SynthSection::default(),
            caption: CaptionSection::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            restore: RestoreSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    /// Toy scenes rendered when no GT directory is given.
    pub toy_count: usize,
    pub toy_size: usize,
    pub mixing: TaskMixing,
    pub params: SynthParams,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            toy_count: 100,
            toy_size: 64,
            mixing: TaskMixing::Uniform,
            params: SynthParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Mock,
    Remote,
}

impl std::str::FromStr for ProviderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mock" => Ok(ProviderKind::Mock),
            "remote" => Ok(ProviderKind::Remote),
            other => Err(format!("unknown provider `{other}` (expected mock or remote)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptionSection {
    pub provider: ProviderKind,
    /// Mock LQ-caption corruption probability per content word.
    pub corruption_rate: f64,
    pub endpoint: Option<String>,
    pub timeout_secs: f64,
    pub retries: u32,
    /// Cache file; defaults to `captions.jsonl` beside the manifest.
    pub cache: Option<PathBuf>,
}

impl Default for CaptionSection {
    fn default() -> Self {
        Self {
            provider: ProviderKind::Mock,
            corruption_rate: 0.3,
            endpoint: None,
            timeout_secs: 30.0,
            retries: 3,
            cache: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RestoreSection {
    /// Defaults to the text mode the restorer was trained with.
    pub text_mode: Option<TextMode>,
    pub sampler: Sampler,
    /// Images restored together when they share a size.
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    /// Overrides `stage2.steps` for each variant.
    pub steps: Option<usize>,
}

impl RunConfig {
    /// Reads `path` (or the defaults when `None`), applies `VLMIR_SEED`
    /// and validates everything.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| UsageError(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| UsageError(format!("invalid config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| UsageError(format!("{SEED_ENV} must be an unsigned integer, got `{s}`")))?;
        }
        check_device()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        let usage = |e: &dyn std::fmt::Display| UsageError(format!("invalid config: {e}"));
        self.synth.params.validate().map_err(|e| usage(&e))?;
        if self.synth.toy_count == 0 || self.synth.toy_size == 0 {
            return Err(UsageError(
                "invalid config: synth.toy_count and synth.toy_size must be positive".into(),
            ));
        }
        self.stage1.validate().map_err(|e| usage(&e))?;
        self.stage2.validate().map_err(|e| usage(&e))?;
        if self.stage2.unet.cond_dim != self.stage1.encoder.embed_dim {
            return Err(UsageError(format!(
                "invalid config: stage2.unet.cond_dim ({}) must equal stage1.encoder.embed_dim ({})",
                self.stage2.unet.cond_dim, self.stage1.encoder.embed_dim
            )));
        }
        if !(0.0..=1.0).contains(&self.caption.corruption_rate) {
            return Err(UsageError(
                "invalid config: caption.corruption_rate must lie in [0, 1]".into(),
            ));
        }
        if self.caption.timeout_secs <= 0.0 {
            return Err(UsageError(
                "invalid config: caption.timeout_secs must be positive".into(),
            ));
        }
        if self.restore.batch_size == Some(0) || self.ablate.steps == Some(0) {
            return Err(UsageError(
                "invalid config: batch sizes and step counts must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes to TOML")
    }
}

/// Only the CPU backend is built in.
fn check_device() -> Result<(), UsageError> {
    match std::env::var(DEVICE_ENV) {
        Ok(d) if !d.trim().eq_ignore_ascii_case("cpu") => Err(UsageError(format!(
            "{DEVICE_ENV}=`{d}` is not available; this build supports only `cpu`"
        ))),
        _ => Ok(()),
    }
}
