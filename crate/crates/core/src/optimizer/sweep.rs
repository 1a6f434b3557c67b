//! Accuracy-only vs joint optimization over several seeds on a fixed
//! stratified subset.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, ObjectiveConfig, Prompt};
use crate::error::{Error, Result};
use crate::evaluate::Evaluator;

use super::{CandidateGenerator, Optimizer, OptimizerConfig, RunDir};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSetting {
    pub name: String,
    pub objective: ObjectiveConfig,
}

pub fn default_settings() -> Vec<SweepSetting> {
    vec![
        SweepSetting {
            name: "acc-only".into(),
            objective: ObjectiveConfig::accuracy_only(),
        },
        SweepSetting {
            name: "joint".into(),
            objective: ObjectiveConfig::joint(),
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub settings: Vec<SweepSetting>,
    pub seeds: Vec<u64>,
    /// Subset size; the whole dataset when larger.
    pub subset_n: usize,
    /// Fixes the subset across seeds and settings.
    pub subset_seed: u64,
    /// Shared optimizer settings; `objective` and `seed` are overridden per run.
    pub optimizer: OptimizerConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            settings: default_settings(),
            seeds: vec![1, 2, 3],
            subset_n: 50,
            subset_seed: 0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// Per-label proportional allocation (largest remainder), members drawn by a
/// seeded shuffle, returned in dataset order.
pub fn stratified_subset(dataset: &Dataset, n: usize, seed: u64) -> Dataset {
    let total = dataset.len();
    if n >= total {
        return dataset.clone();
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, ex) in dataset.examples.iter().enumerate() {
        groups.entry(ex.gold_label.as_str()).or_default().push(i);
    }
    let mut alloc: Vec<(&str, usize, f64)> = groups
        .iter()
        .map(|(l, idx)| {
            let exact = n as f64 * idx.len() as f64 / total as f64;
            (*l, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut short = n - alloc.iter().map(|a| a.1).sum::<usize>();
    let mut order: Vec<usize> = (0..alloc.len()).collect();
    order.sort_by(|&a, &b| alloc[b].2.total_cmp(&alloc[a].2).then(a.cmp(&b)));
    for i in order {
        if short == 0 {
            break;
        }
        alloc[i].1 += 1;
        short -= 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(n);
    for (label, take, _) in alloc {
        let mut idx = groups[label].clone();
        idx.shuffle(&mut rng);
        chosen.extend(idx.into_iter().take(take));
    }
    chosen.sort_unstable();
    Dataset::new(chosen.into_iter().map(|i| dataset.examples[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub task: String,
    pub model: String,
    pub setting: String,
    pub seed: u64,
    pub acc_start: Option<f64>,
    pub acc_end: Option<f64>,
    pub flip_start: Option<f64>,
    pub flip_end: Option<f64>,
    pub flip_end_fresh: Option<f64>,
    pub iterations: Option<usize>,
    pub status: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(MeanStd { mean, std: var.sqrt() })
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub setting: String,
    pub n_ok: usize,
    pub acc_start: Option<MeanStd>,
    pub acc_end: Option<MeanStd>,
    pub flip_start: Option<MeanStd>,
    pub flip_end: Option<MeanStd>,
    pub flip_end_fresh: Option<MeanStd>,
}

pub fn aggregate(rows: &[SweepRow], settings: &[SweepSetting]) -> Vec<AggregateRow> {
    settings
        .iter()
        .map(|s| {
            let ok: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.setting == s.name && r.status == "ok")
                .collect();
            let col = |f: fn(&SweepRow) -> Option<f64>| {
                MeanStd::of(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
            };
            AggregateRow {
                setting: s.name.clone(),
                n_ok: ok.len(),
                acc_start: col(|r| r.acc_start),
                acc_end: col(|r| r.acc_end),
                flip_start: col(|r| r.flip_start),
                flip_end: col(|r| r.flip_end),
                flip_end_fresh: col(|r| r.flip_end_fresh),
            }
        })
        .collect()
}

/// Every (setting, seed) run in order. A failing run becomes a row with its
/// error in `status`; the sweep itself fails only on invalid configuration.
/// With `out`, run `r` persists under `out/runs/<setting>-seed<seed>/`.
pub fn run_sweep(
    cfg: &SweepConfig,
    evaluator: Evaluator<'_>,
    generator: &dyn CandidateGenerator,
    initial: &Prompt,
    dataset: &Dataset,
    out: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    if cfg.settings.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one setting and one seed".into()));
    }
    cfg.optimizer.validate()?;
    let subset = stratified_subset(dataset, cfg.subset_n, cfg.subset_seed);
    let mut rows = Vec::new();
    for setting in &cfg.settings {
        for &seed in &cfg.seeds {
            let opt = Optimizer {
                evaluator,
                generator,
                config: OptimizerConfig {
                    objective: setting.objective,
                    seed,
                    ..cfg.optimizer.clone()
                },
            };
            let result = out
                .map(|o| RunDir::fresh(o.join("runs").join(format!("{}-seed{seed}", setting.name))))
                .transpose()
                .and_then(|dir| opt.run(initial, &subset, dir.as_ref(), false));
            let mut row = SweepRow {
                task: evaluator.task.id.clone(),
                model: evaluator.predictor.model().name().to_string(),
                setting: setting.name.clone(),
                seed,
                acc_start: None,
                acc_end: None,
                flip_start: None,
                flip_end: None,
                flip_end_fresh: None,
                iterations: None,
                status: "ok".into(),
            };
            match result {
                Ok(o) => {
                    row.acc_start = Some(o.start.accuracy);
                    row.acc_end = Some(o.end.accuracy);
                    row.flip_start = Some(o.start.flip_rate);
                    row.flip_end = Some(o.flip_end_insample);
                    row.flip_end_fresh = Some(o.flip_end_fresh);
                    row.iterations = Some(o.iterations);
                }
                Err(e) => {
                    log::error!("run {} seed {seed} failed: {e}", setting.name);
                    row.status = format!("failed: {e}");
                }
            }
            rows.push(row);
        }
    }
    Ok(rows)
}
