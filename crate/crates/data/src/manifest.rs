use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Result};
use crate::label::DegradationLabel;
use crate::scene::ToyScene;
use crate::synth::SynthParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(DataError::InvalidManifest(format!("unknown split `{other}`"))),
        }
    }
}

/// How universal-mode batches draw from the degradation tasks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMixing {
    /// Each draw first picks a task uniformly, then a record of that task.
    #[default]
    Uniform,
    /// Records are drawn in proportion to how many each task has.
    Proportional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    /// Paths are relative to the manifest's directory unless absolute.
    pub gt_path: PathBuf,
    pub lq_path: PathBuf,
    pub degradation: DegradationLabel,
    #[serde(default)]
    pub gt_caption: Option<String>,
    #[serde(default)]
    pub lq_caption: Option<String>,
    /// Toy-scene metadata, present for procedurally generated corpora.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<ToyScene>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestMetadata {
    pub tasks: Vec<DegradationLabel>,
    #[serde(default)]
    pub synth: Option<SynthParams>,
    pub seed: u64,
    #[serde(default)]
    pub mixing: TaskMixing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub metadata: ManifestMetadata,
    pub records: Vec<ManifestRecord>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(
        split: Split,
        metadata: ManifestMetadata,
        records: Vec<ManifestRecord>,
        base_dir: impl Into<PathBuf>,
    ) -> Self {
        Self {
            split,
            metadata,
            records,
            base_dir: base_dir.into(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        let mut manifest: Self = serde_json::from_str(&text).map_err(|e| DataError::json(path, e))?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(manifest)
    }

    /// Writes the manifest atomically (temp file + rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| DataError::json(path, e))?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text + "\n").map_err(|e| DataError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| DataError::io(path, e))
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn gt_path(&self, record: &ManifestRecord) -> PathBuf {
        self.resolve(&record.gt_path)
    }

    pub fn lq_path(&self, record: &ManifestRecord) -> PathBuf {
        self.resolve(&record.lq_path)
    }

    /// Rejects duplicate ids, empty manifests and dangling file paths.
    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(DataError::InvalidManifest("manifest has no records".into()));
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(DataError::InvalidManifest(format!("duplicate id `{}`", r.id)));
            }
            for p in [self.gt_path(r), self.lq_path(r)] {
                if !p.is_file() {
                    return Err(DataError::InvalidManifest(format!(
                        "record `{}` references missing file {}",
                        r.id,
                        p.display()
                    )));
                }
            }
            if !self.metadata.tasks.is_empty() && !self.metadata.tasks.contains(&r.degradation) {
                return Err(DataError::InvalidManifest(format!(
                    "record `{}` labeled {} but manifest tasks are {:?}",
                    r.id, r.degradation, self.metadata.tasks
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Record indices grouped by degradation label.
    pub fn by_task(&self) -> BTreeMap<DegradationLabel, Vec<usize>> {
        let mut groups: BTreeMap<DegradationLabel, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            groups.entry(r.degradation).or_default().push(i);
        }
        groups
    }

    /// One epoch's worth of record indices under the given mixing policy.
    pub fn epoch_order(&self, mixing: TaskMixing, rng: &mut impl Rng) -> Vec<usize> {
        let n = self.records.len();
        match mixing {
            TaskMixing::Proportional => {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(rng);
                order
            }
            TaskMixing::Uniform => {
                let mut groups: Vec<Vec<usize>> = self.by_task().into_values().collect();
                for g in groups.iter_mut() {
                    g.shuffle(rng);
                }
                let mut cursors = vec![0usize; groups.len()];
                (0..n)
                    .map(|_| {
                        let t = rng.random_range(0..groups.len());
                        let idx = groups[t][cursors[t] % groups[t].len()];
                        cursors[t] += 1;
                        idx
                    })
                    .collect()
            }
        }
    }
}
