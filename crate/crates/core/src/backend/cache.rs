use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::domain::Prediction;
use crate::error::{Error, Result};

pub const CACHE_FILE: &str = "predictions.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub digest: String,
    pub prediction: Prediction,
}

/// Content-addressed prediction store. Always held in memory; when opened on a
/// directory it is mirrored to an append-only JSON-lines file.
#[derive(Debug, Default)]
pub struct PredictionCache {
    entries: RwLock<HashMap<String, Prediction>>,
    file: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl PredictionCache {
    pub fn in_memory() -> Self {
        PredictionCache::default()
    }

    /// Load `dir/predictions.jsonl` (creating it if needed) and append to it from now on.
    /// A truncated final line from an interrupted write is skipped.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CACHE_FILE);
        let mut entries = HashMap::new();
        if path.exists() {
            let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheEntry>(&line) {
                    Ok(e) => {
                        entries.entry(e.digest).or_insert(e.prediction);
                    }
                    Err(err) => log::warn!("skipping unreadable cache line in {}: {err}", path.display()),
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(PredictionCache {
            entries: RwLock::new(entries),
            file: Some(Mutex::new(file)),
            path: Some(path),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, digest: &str) -> Option<Prediction> {
        self.entries.read().expect("cache lock").get(digest).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First write wins; later inserts for the same digest are ignored.
    pub fn insert(&self, digest: &str, prediction: &Prediction) -> Result<()> {
        let mut entries = self.entries.write().expect("cache lock");
        if entries.contains_key(digest) {
            return Ok(());
        }
        if let (Some(file), Some(path)) = (&self.file, &self.path) {
            let line = serde_json::to_string(&CacheEntry {
                digest: digest.to_string(),
                prediction: prediction.clone(),
            })?;
            let mut f = file.lock().expect("cache file lock");
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
            f.flush().map_err(|e| Error::io(path, e))?;
        }
        entries.insert(digest.to_string(), prediction.clone());
        Ok(())
    }
}
