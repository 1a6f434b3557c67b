//! Effective settings: command-line flag, then config file, then default.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use promptstab_core::backend::mock::{MockParams, MockScenario};
use promptstab_core::backend::BackendConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendArg {
    Mock,
    Http,
}

/// Keys accepted in `--config` JSON files. Every key is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub backend: Option<BackendArg>,
    pub seed: Option<u64>,
    pub label_only: Option<bool>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub temperature: Option<f64>,
    pub mock_a: Option<f64>,
    pub mock_b: Option<f64>,
    pub mock_c: Option<f64>,
    pub mock_scenario: Option<MockScenario>,
    pub concurrency: Option<usize>,
    pub cache_dir: Option<PathBuf>,
    pub k: Option<usize>,
    pub alpha: Option<f64>,
    pub ece_bins: Option<usize>,
    pub lambda_perf: Option<f64>,
    pub lambda_stab: Option<f64>,
    pub candidates: Option<usize>,
    pub iters: Option<usize>,
    pub patience: Option<usize>,
    pub n_failures: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub subset_n: Option<usize>,
    pub subset_seed: Option<u64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config file {}", path.display()))
    }
}

pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Backend and shared options common to every model-driven command.
#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    /// Seeds the mock backend and the paraphrase generator.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Labels only, no probabilities.
    #[arg(long)]
    pub label_only: bool,
    /// Chat-completions URL for the http backend.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub mock_a: Option<f64>,
    #[arg(long)]
    pub mock_b: Option<f64>,
    #[arg(long)]
    pub mock_c: Option<f64>,
    /// Worker threads and simultaneous remote calls. 1 runs sequentially.
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Persistent prediction cache shared across runs.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSettings {
    pub backend: BackendArg,
    pub seed: u64,
    pub label_only: bool,
    pub endpoint: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub mock: Option<MockParams>,
    #[serde(skip, default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(skip)]
    pub cache_dir: Option<PathBuf>,
}

impl BackendArgs {
    pub fn resolve(&self, file: &FileConfig) -> Result<BackendSettings> {
        let backend = pick(self.backend, file.backend, BackendArg::Mock);
        let mock = match backend {
            BackendArg::Mock => {
                let d = MockParams::default();
                let mut p = MockParams::new(
                    pick(self.mock_a, file.mock_a, d.quality_scale),
                    pick(self.mock_b, file.mock_b, d.difficulty_scale),
                    pick(self.mock_c, file.mock_c, d.instability_scale),
                )?;
                if let Some(s) = &file.mock_scenario {
                    p.scenario = s.clone();
                    p.validate()?;
                }
                Some(p)
            }
            BackendArg::Http => None,
        };
        Ok(BackendSettings {
            backend,
            seed: pick(self.seed, file.seed, 1),
            label_only: self.label_only || file.label_only.unwrap_or(false),
            endpoint: self.endpoint.clone().or_else(|| file.endpoint.clone()),
            model: pick(self.model.clone(), file.model.clone(), "mock".into()),
            temperature: pick(self.temperature, file.temperature, 0.0),
            mock,
            concurrency: pick(self.concurrency, file.concurrency, default_concurrency()).max(1),
            cache_dir: self.cache_dir.clone().or_else(|| file.cache_dir.clone()),
        })
    }
}

fn default_concurrency() -> usize {
    std::thread::available_parallelism().map_or(4, |n| n.get())
}

impl BackendSettings {
    pub fn backend_config(&self) -> Result<BackendConfig> {
        let mut cfg = match self.backend {
            BackendArg::Mock => BackendConfig::mock(
                self.seed,
                self.mock.clone().unwrap_or_default(),
                !self.label_only,
            ),
            BackendArg::Http => {
                let url = self
                    .endpoint
                    .clone()
                    .context("the http backend needs --endpoint")?;
                let mut c = BackendConfig::http(url, self.model.clone(), !self.label_only);
                c.seed = Some(self.seed);
                c
            }
        };
        cfg.temperature = self.temperature;
        cfg.concurrency = self.concurrency;
        Ok(cfg)
    }
}
