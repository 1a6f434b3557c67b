//! On-disk layout of one optimizer run.
//!
//! ```text
//! run.json            manifest (config, seeds, provenance)
//! trajectory.jsonl    one IterationRecord per line, flushed per iteration
//! prompts/<id>.json   every prompt evaluated
//! summaries/<id>.json EvalSummary per evaluated prompt
//! result.json         outcome, written when the run finishes
//! ```

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::domain::{EvalSummary, Prompt};
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};

use super::IterationRecord;

pub const TRAJECTORY_FILE: &str = "trajectory.jsonl";
pub const MANIFEST_FILE: &str = "run.json";
pub const RESULT_FILE: &str = "result.json";

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

impl RunDir {
    /// Open (creating directories) without touching existing files.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["prompts", "summaries"] {
            let d = root.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(RunDir { root })
    }

    /// Open for a fresh run: any earlier trajectory and result are discarded.
    pub fn fresh(root: impl Into<PathBuf>) -> Result<Self> {
        let dir = RunDir::open(root)?;
        for f in [TRAJECTORY_FILE, RESULT_FILE] {
            let p = dir.root.join(f);
            if p.exists() {
                std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write_manifest<T: Serialize>(&self, manifest: &T) -> Result<()> {
        write_json(self.root.join(MANIFEST_FILE), manifest)
    }

    pub fn read_manifest<T: DeserializeOwned>(&self) -> Result<T> {
        read_json(self.root.join(MANIFEST_FILE))
    }

    pub fn write_result<T: Serialize>(&self, result: &T) -> Result<()> {
        write_json(self.root.join(RESULT_FILE), result)
    }

    pub fn save_prompt(&self, prompt: &Prompt) -> Result<()> {
        write_json(self.root.join("prompts").join(format!("{}.json", file_stem(&prompt.id))), prompt)
    }

    pub fn load_prompt(&self, id: &str) -> Result<Prompt> {
        read_json(self.root.join("prompts").join(format!("{}.json", file_stem(id))))
    }

    pub fn save_summary(&self, summary: &EvalSummary) -> Result<()> {
        write_json(
            self.root
                .join("summaries")
                .join(format!("{}.json", file_stem(&summary.prompt_id))),
            summary,
        )
    }

    pub fn append_iteration(&self, record: &IterationRecord) -> Result<()> {
        let path = self.root.join(TRAJECTORY_FILE);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))?;
        f.sync_data().map_err(|e| Error::io(&path, e))
    }

    /// Complete lines only; a torn final line from a crash is dropped.
    pub fn read_trajectory(&self) -> Result<Vec<IterationRecord>> {
        let path = self.root.join(TRAJECTORY_FILE);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let mut out = Vec::new();
        let complete = if text.ends_with('\n') { text.as_str() } else { text.rsplit_once('\n').map_or("", |(a, _)| a) };
        for (i, line) in complete.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            out.push(
                serde_json::from_str(line)
                    .map_err(|e| Error::parse(&path, format!("line {}: {e}", i + 1)))?,
            );
        }
        Ok(out)
    }
}
