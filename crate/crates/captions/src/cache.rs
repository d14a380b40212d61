//! Append-only caption cache: one JSON record per line, last write wins.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{CaptionError, Result};
use crate::provider::CaptionSource;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub source: CaptionSource,
    pub text: String,
    pub provider: String,
    /// RFC 3339 timestamp.
    pub created_at: String,
}

impl CaptionRecord {
    pub fn new(image_id: &str, source: CaptionSource, text: &str, provider: &str) -> Self {
        Self {
            image_id: image_id.to_string(),
            source,
            text: text.to_string(),
            provider: provider.to_string(),
            created_at: chrono::Utc::now().to_rfc3339(),
        }
    }
}

#[derive(Debug)]
pub struct CaptionCache {
    path: PathBuf,
    index: HashMap<(String, CaptionSource), CaptionRecord>,
    skipped: usize,
}

impl CaptionCache {
    /// Loads the cache, creating an empty one if the file does not exist.
    /// Unparseable lines are skipped with a warning.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut cache = Self {
            path: path.clone(),
            index: HashMap::new(),
            skipped: 0,
        };
        if !path.exists() {
            return Ok(cache);
        }
        let reader = BufReader::new(std::fs::File::open(&path)?);
        for (lineno, line) in reader.lines().enumerate() {
            let line = match line {
                Ok(l) => l,
                Err(e) => {
                    warn!("{}:{}: unreadable line skipped: {e}", path.display(), lineno + 1);
                    cache.skipped += 1;
                    continue;
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<CaptionRecord>(&line) {
                Ok(rec) if !rec.text.is_empty() => {
                    cache.index.insert((rec.image_id.clone(), rec.source), rec);
                }
                Ok(_) | Err(_) => {
                    warn!("{}:{}: corrupt caption record skipped", path.display(), lineno + 1);
                    cache.skipped += 1;
                }
            }
        }
        Ok(cache)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Number of lines skipped as corrupt when the cache was opened.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn get(&self, image_id: &str, source: CaptionSource) -> Option<&CaptionRecord> {
        self.index.get(&(image_id.to_string(), source))
    }

    pub fn put(&mut self, record: CaptionRecord) -> Result<()> {
        if record.text.is_empty() {
            return Err(CaptionError::EmptyCaption);
        }
        if let Some(parent) = self.path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&self.path)?;
        let line = serde_json::to_string(&record).map_err(std::io::Error::other)?;
        writeln!(file, "{line}")?;
        self.index.insert((record.image_id.clone(), record.source), record);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_get_round_trip_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("captions.jsonl");
        let rec = CaptionRecord::new("img1", CaptionSource::Gt, "a dog", "mock");
        let mut cache = CaptionCache::open(&path).unwrap();
        cache.put(rec.clone()).unwrap();
        assert_eq!(cache.get("img1", CaptionSource::Gt), Some(&rec));
        assert_eq!(cache.get("img1", CaptionSource::Lq), None);
        let reopened = CaptionCache::open(&path).unwrap();
        assert_eq!(reopened.get("img1", CaptionSource::Gt), Some(&rec));
    }

    #[test]
    fn last_write_wins() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let mut cache = CaptionCache::open(&path).unwrap();
        cache
            .put(CaptionRecord::new("a", CaptionSource::Lq, "old", "mock"))
            .unwrap();
        cache
            .put(CaptionRecord::new("a", CaptionSource::Lq, "new", "mock"))
            .unwrap();
        assert_eq!(cache.get("a", CaptionSource::Lq).unwrap().text, "new");
        assert_eq!(
            CaptionCache::open(&path)
                .unwrap()
                .get("a", CaptionSource::Lq)
                .unwrap()
                .text,
            "new"
        );
    }

    #[test]
    fn corrupt_middle_line_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let mut cache = CaptionCache::open(&path).unwrap();
        cache
            .put(CaptionRecord::new("a", CaptionSource::Gt, "first", "mock"))
            .unwrap();
        {
            let mut f = OpenOptions::new().append(true).open(&path).unwrap();
            writeln!(f, "{{\"image_id\": \"b\", \"sour").unwrap();
        }
        cache
            .put(CaptionRecord::new("c", CaptionSource::Gt, "third", "mock"))
            .unwrap();
        let reopened = CaptionCache::open(&path).unwrap();
        assert_eq!(reopened.skipped(), 1);
        assert_eq!(reopened.len(), 2);
        assert_eq!(reopened.get("c", CaptionSource::Gt).unwrap().text, "third");
    }

    #[test]
    fn empty_text_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cache = CaptionCache::open(dir.path().join("c.jsonl")).unwrap();
        assert!(cache
            .put(CaptionRecord::new("a", CaptionSource::Gt, "", "mock"))
            .is_err());
    }
}
