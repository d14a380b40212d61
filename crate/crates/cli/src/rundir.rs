//! Run directories: `<out>/<command>_<timestamp>_<hash8>` holding a snapshot
//! of the resolved config.

use std::path::{Path, PathBuf};

use anyhow::Context;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const INVOCATION_FILE: &str = "invocation.json";

/// Creates a fresh run directory and writes the config snapshot and the
/// invocation into it.
pub fn create(out: &Path, command: &str, cfg: &RunConfig, invocation: &serde_json::Value) -> anyhow::Result<PathBuf> {
    let snapshot = cfg.to_toml();
    let mut hasher = Sha256::new();
    hasher.update(command.as_bytes());
    hasher.update(snapshot.as_bytes());
    hasher.update(invocation.to_string().as_bytes());
    let digest = hasher.finalize();
    let hash8: String = digest.iter().take(4).map(|b| format!("{b:02x}")).collect();
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S");
    let base = format!("{command}_{stamp}_{hash8}");
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut dir = out.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = out.join(format!("{base}_{n}"));
        n += 1;
    }
    std::fs::create_dir(&dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join(CONFIG_SNAPSHOT), snapshot).context("writing config snapshot")?;
    std::fs::write(
        dir.join(INVOCATION_FILE),
        serde_json::to_string_pretty(invocation)? + "\n",
    )
    .context("writing invocation")?;
    Ok(dir)
}
