use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use promptstab_core::analysis::{self, StratifiedReport};
use promptstab_core::backend::Predictor;
use promptstab_core::conformal::{run_split_conformal, ConformalReport, DEFAULT_ALPHA};
use promptstab_core::domain::{validate_dataset, Dataset, EvalSummary, ObjectiveConfig, Prompt, Task};
use promptstab_core::evaluate::Evaluator;
use promptstab_core::io::{read_json, write_atomic, write_json};
use promptstab_core::metrics::DEFAULT_ECE_BINS;
use promptstab_core::optimizer::sweep::{aggregate, run_sweep, AggregateRow, SweepConfig, SweepRow};
use promptstab_core::optimizer::{
    CandidateGenerator, LlmCandidateGenerator, MockCandidateGenerator, Optimizer, OptimizerConfig,
    RunDir, RunOutcome,
};
use promptstab_core::par::Exec;
use promptstab_core::paraphrase::{load_variants, save_variants, LlmParaphraser, VariantGenerator, DEFAULT_K};
use promptstab_core::synthetic;

use crate::config::{pick, BackendArg, BackendArgs, BackendSettings, FileConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance stamped on every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub tool: String,
    pub version: String,
    pub task_id: String,
    pub label_set: Vec<String>,
    pub dataset_hash: String,
}

impl Meta {
    fn new(task: &Task, data: &Dataset) -> Self {
        Meta {
            tool: "promptstab".into(),
            version: VERSION.into(),
            task_id: task.id.clone(),
            label_set: task.label_set.clone(),
            dataset_hash: data.content_hash(),
        }
    }
}

/// `summary.json`
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: Meta,
    pub settings: serde_json::Value,
    pub paraphraser: String,
    pub summary: EvalSummary,
}

/// `conformal.json`
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConformalOutput {
    pub meta: Meta,
    pub prompt_id: String,
    #[serde(flatten)]
    pub report: ConformalReport,
}

/// `analysis.json`
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisOutput {
    pub meta: Meta,
    pub prompt_id: String,
    pub has_conformal: bool,
    pub report: StratifiedReport,
}

/// `run.json`
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub meta: Meta,
    pub task_path: PathBuf,
    pub data_path: PathBuf,
    pub initial_prompt: Prompt,
    pub backend: BackendSettings,
    pub optimizer: OptimizerConfig,
}

/// `sweep.json`
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepOutput {
    pub meta: Meta,
    pub backend: BackendSettings,
    pub config: SweepConfig,
    pub rows: Vec<SweepRow>,
    pub aggregate: Vec<AggregateRow>,
}

// ---------------------------------------------------------------------------
// shared plumbing

pub fn load_prompt(path: &Path) -> Result<Prompt> {
    if path.extension().is_some_and(|e| e == "json") {
        return read_json(path).with_context(|| format!("loading prompt {}", path.display()));
    }
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading prompt file {}", path.display()))?;
    let id = path
        .file_stem()
        .map_or("prompt".into(), |s| s.to_string_lossy().into_owned());
    Ok(Prompt::manual(id, text.trim_end()))
}

fn load_task_data(task: &Path, data: &Path) -> Result<(Task, Dataset)> {
    let task = Task::load(task)?;
    let data = Dataset::load(data)?;
    let violations = validate_dataset(&data, &task);
    if !violations.is_empty() {
        let shown: Vec<String> = violations.iter().take(10).map(|v| v.to_string()).collect();
        bail!(
            "dataset failed validation ({} violations): {}",
            violations.len(),
            shown.join(", ")
        );
    }
    if data.is_empty() {
        bail!("dataset is empty");
    }
    Ok((task, data))
}

struct Session {
    settings: BackendSettings,
    predictor: Arc<Predictor>,
    variants: VariantGenerator,
    exec: Exec,
}

impl Session {
    fn new(settings: BackendSettings) -> Result<Self> {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(settings.concurrency)
            .build_global()
        {
            log::debug!("thread pool already configured: {e}");
        }
        let cfg = settings.backend_config()?;
        let predictor = Arc::new(Predictor::from_config(&cfg, settings.cache_dir.as_deref())?);
        let variants = match settings.backend {
            BackendArg::Mock => VariantGenerator::mock(),
            BackendArg::Http => VariantGenerator::new(Box::new(LlmParaphraser::new(predictor.clone()))),
        };
        let exec = if settings.concurrency == 1 {
            Exec::Sequential
        } else {
            Exec::available()
        };
        Ok(Session {
            settings,
            predictor,
            variants,
            exec,
        })
    }

    fn evaluator<'a>(&'a self, task: &'a Task, ece_bins: usize) -> Evaluator<'a> {
        let mut ev = Evaluator::new(&self.predictor, &self.variants, task).with_exec(self.exec);
        ev.ece_bins = ece_bins;
        ev
    }

    fn candidate_generator(&self) -> Box<dyn CandidateGenerator> {
        match self.settings.backend {
            BackendArg::Mock => Box::new(MockCandidateGenerator),
            BackendArg::Http => Box::new(LlmCandidateGenerator::new(self.predictor.clone())),
        }
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().context("flushing csv")?;
    write_atomic(path, &bytes)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// paraphrase

#[derive(Debug, Args)]
pub struct ParaphraseArgs {
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long)]
    pub prompt: PathBuf,
    /// Checks the prompt placeholders against this task.
    #[arg(long)]
    pub task: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn paraphrase(a: &ParaphraseArgs) -> Result<()> {
    let file = FileConfig::load(a.backend.config.as_deref())?;
    let settings = a.backend.resolve(&file)?;
    let prompt = load_prompt(&a.prompt)?;
    if let Some(t) = &a.task {
        prompt.validate_for(&Task::load(t)?)?;
    }
    let k = pick(a.k, file.k, DEFAULT_K);
    let seed = settings.seed;
    let session = Session::new(settings)?;
    let set = session.variants.generate_variants(&prompt, k, seed)?;
    save_variants(&set, &a.out)?;
    log::info!("wrote {} variants to {}", set.k(), a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Base prompt (.txt or .json). Optional when --variants is given.
    #[arg(long)]
    pub prompt: Option<PathBuf>,
    /// Pre-authored variant file used instead of generated paraphrases.
    #[arg(long)]
    pub variants: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub ece_bins: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let file = FileConfig::load(a.backend.config.as_deref())?;
    let settings = a.backend.resolve(&file)?;
    let (task, data) = load_task_data(&a.task, &a.data)?;
    let k = pick(a.k, file.k, DEFAULT_K);
    let ece_bins = pick(a.ece_bins, file.ece_bins, DEFAULT_ECE_BINS);
    let seed = settings.seed;
    let session = Session::new(settings)?;
    let ev = session.evaluator(&task, ece_bins);

    let set = match (&a.variants, &a.prompt) {
        (Some(v), _) => load_variants(v)?,
        (None, Some(p)) => session.variants.generate_variants(&load_prompt(p)?, k, seed)?,
        (None, None) => bail!("eval needs --prompt or --variants"),
    };
    set.base.validate_for(&task)?;
    let summary = ev.evaluate_set(&set, &data)?;
    log::info!(
        "{}: accuracy {:.3}, mean flip rate {:.3} over {} examples",
        summary.prompt_id,
        summary.accuracy,
        summary.mean_flip_rate,
        summary.n_examples
    );
    let report = EvalReport {
        meta: Meta::new(&task, &data),
        settings: serde_json::to_value(&session.settings)?,
        paraphraser: if a.variants.is_some() {
            "file".into()
        } else {
            session.variants.name().into()
        },
        summary,
    };
    write_json(a.out.join("summary.json"), &report)?;
    save_variants(&set, a.out.join("variants.json"))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// conformal

#[derive(Debug, Args)]
pub struct ConformalArgs {
    /// `summary.json` written by `eval`.
    #[arg(long)]
    pub summary: PathBuf,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Seed of the calibration/evaluation split.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn load_eval_report(path: &Path) -> Result<EvalReport> {
    read_json(path).with_context(|| format!("loading eval summary {}", path.display()))
}

pub fn conformal(a: &ConformalArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let alpha = pick(a.alpha, file.alpha, DEFAULT_ALPHA);
    let seed = pick(a.seed, file.seed, 1);
    let eval = load_eval_report(&a.summary)?;
    if eval
        .summary
        .records
        .iter()
        .any(|r| r.base_prediction.probs.is_none())
    {
        bail!(
            "conformal prediction needs label probabilities, but {} was produced by a label-only backend",
            a.summary.display()
        );
    }
    let (report, _) = run_split_conformal(&eval.summary.records, &eval.meta.label_set, alpha, seed)?;
    log::info!(
        "alpha {alpha}: coverage {:.3}, mean set size {:.3} on {} evaluation records",
        report.coverage,
        report.mean_set_size,
        report.n_eval
    );
    let out = ConformalOutput {
        meta: eval.meta,
        prompt_id: eval.summary.prompt_id,
        report,
    };
    write_json(a.out.join("conformal.json"), &out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub summary: PathBuf,
    /// `conformal.json` for the same summary; set-size sections are absent without it.
    #[arg(long)]
    pub conformal: Option<PathBuf>,
    /// Further summaries for the accuracy vs flip-rate scatter.
    #[arg(long = "scatter", num_args = 1..)]
    pub scatter: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn analyze(a: &AnalyzeArgs) -> Result<()> {
    let eval = load_eval_report(&a.summary)?;
    let mut records = eval.summary.records.clone();
    if records.is_empty() {
        bail!("{} has no records", a.summary.display());
    }
    if let Some(cpath) = &a.conformal {
        let conf: ConformalOutput =
            read_json(cpath).with_context(|| format!("loading conformal report {}", cpath.display()))?;
        if conf.meta.dataset_hash != eval.meta.dataset_hash || conf.prompt_id != eval.summary.prompt_id {
            bail!(
                "{} was not computed from {}",
                cpath.display(),
                a.summary.display()
            );
        }
        let eval_half: HashMap<&str, _> = conf
            .report
            .records
            .iter()
            .filter(|r| r.split == "evaluation")
            .map(|r| (r.example_id.as_str(), r))
            .collect();
        for r in &mut records {
            if let Some(s) = eval_half.get(r.example_id.as_str()) {
                r.conformal_set = Some(s.conformal_set.clone());
                r.covered = Some(s.covered);
            }
        }
    }
    let report = analysis::stratify(&records)?;

    let mut summaries = vec![eval.summary.clone()];
    for p in &a.scatter {
        summaries.push(load_eval_report(p)?.summary);
    }
    let scatter = analysis::prompt_scatter(&summaries);
    let margins = report.margin_by_fliprate_bins.clone().unwrap_or_default();

    write_json(
        a.out.join("analysis.json"),
        &AnalysisOutput {
            meta: eval.meta,
            prompt_id: eval.summary.prompt_id,
            has_conformal: a.conformal.is_some(),
            report,
        },
    )?;
    write_csv(
        &a.out.join("margin_by_flip.csv"),
        &margins,
        &["flip_rate", "count", "min", "q1", "median", "q3", "max"],
    )?;
    write_csv(
        &a.out.join("prompt_scatter.csv"),
        &scatter,
        &["prompt_id", "accuracy", "mean_flip_rate"],
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// optimize / sweep

#[derive(Debug, Clone, Args)]
pub struct OptimizerArgs {
    #[arg(long)]
    pub lambda_perf: Option<f64>,
    #[arg(long)]
    pub lambda_stab: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Candidates proposed per iteration.
    #[arg(long)]
    pub candidates: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Failure excerpts of each kind shown to the candidate generator.
    #[arg(long)]
    pub n_failures: Option<usize>,
}

impl OptimizerArgs {
    fn resolve(&self, file: &FileConfig, seed: u64, default_objective: ObjectiveConfig) -> Result<OptimizerConfig> {
        let d = OptimizerConfig::default();
        let objective = ObjectiveConfig::new(
            pick(self.lambda_perf, file.lambda_perf, default_objective.lambda_perf),
            pick(self.lambda_stab, file.lambda_stab, default_objective.lambda_stab),
        )?;
        let cfg = OptimizerConfig {
            objective,
            k_variants: pick(self.k, file.k, d.k_variants),
            n_candidates: pick(self.candidates, file.candidates, d.n_candidates),
            max_iterations: pick(self.iters, file.iters, d.max_iterations),
            patience: pick(self.patience, file.patience, d.patience),
            n_failure_examples: pick(self.n_failures, file.n_failures, d.n_failure_examples),
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
    #[arg(long, required_unless_present = "resume")]
    pub task: Option<PathBuf>,
    #[arg(long, required_unless_present = "resume")]
    pub data: Option<PathBuf>,
    #[arg(long, required_unless_present = "resume")]
    pub prompt: Option<PathBuf>,
    #[arg(long, required_unless_present = "resume")]
    pub out: Option<PathBuf>,
    /// Continue an interrupted run from its last flushed iteration.
    #[arg(long, conflicts_with_all = ["task", "data", "prompt", "out"])]
    pub resume: Option<PathBuf>,
}

pub fn optimize(a: &OptimizeArgs) -> Result<()> {
    let (manifest, dir, resume) = match &a.resume {
        Some(root) => {
            let dir = RunDir::open(root)?;
            let mut m: RunManifest = dir
                .read_manifest()
                .with_context(|| format!("{} is not a run directory", root.display()))?;
            let file = FileConfig::load(a.backend.config.as_deref())?;
            m.backend.concurrency = a.backend.resolve(&file)?.concurrency;
            m.backend.cache_dir = a.backend.cache_dir.clone();
            (m, dir, true)
        }
        None => {
            let file = FileConfig::load(a.backend.config.as_deref())?;
            let backend = a.backend.resolve(&file)?;
            let (task_path, data_path, prompt_path, out) = (
                a.task.clone().expect("clap"),
                a.data.clone().expect("clap"),
                a.prompt.clone().expect("clap"),
                a.out.clone().expect("clap"),
            );
            let (task, data) = load_task_data(&task_path, &data_path)?;
            let prompt = load_prompt(&prompt_path)?;
            prompt.validate_for(&task)?;
            let optimizer = a.optimizer.resolve(&file, backend.seed, ObjectiveConfig::joint())?;
            let m = RunManifest {
                meta: Meta::new(&task, &data),
                task_path,
                data_path,
                initial_prompt: prompt,
                backend,
                optimizer,
            };
            let dir = RunDir::fresh(out)?;
            dir.write_manifest(&m)?;
            (m, dir, false)
        }
    };
    let (task, data) = load_task_data(&manifest.task_path, &manifest.data_path)?;
    if data.content_hash() != manifest.meta.dataset_hash {
        bail!(
            "dataset {} changed since the run started",
            manifest.data_path.display()
        );
    }
    let session = Session::new(manifest.backend.clone())?;
    let generator = session.candidate_generator();
    let opt = Optimizer {
        evaluator: session.evaluator(&task, DEFAULT_ECE_BINS),
        generator: generator.as_ref(),
        config: manifest.optimizer.clone(),
    };
    let out: RunOutcome = opt.run(&manifest.initial_prompt, &data, Some(&dir), resume)?;
    log::info!(
        "final prompt {}: J {:.3} -> {:.3}, accuracy {:.3} -> {:.3}, flip rate {:.3} -> {:.3}",
        out.final_prompt.id,
        out.start.j,
        out.end.j,
        out.start.accuracy,
        out.end.accuracy,
        out.start.flip_rate,
        out.end.flip_rate
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub prompt: PathBuf,
    /// Comma-separated optimizer seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub subset_n: Option<usize>,
    #[arg(long)]
    pub subset_seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Returns false when every run failed.
pub fn sweep(a: &SweepArgs) -> Result<bool> {
    let file = FileConfig::load(a.backend.config.as_deref())?;
    let backend = a.backend.resolve(&file)?;
    let (task, data) = load_task_data(&a.task, &a.data)?;
    let prompt = load_prompt(&a.prompt)?;
    prompt.validate_for(&task)?;
    let d = SweepConfig::default();
    let cfg = SweepConfig {
        seeds: pick(a.seeds.clone(), file.seeds.clone(), d.seeds),
        subset_n: pick(a.subset_n, file.subset_n, d.subset_n),
        subset_seed: pick(a.subset_seed, file.subset_seed, d.subset_seed),
        optimizer: a.optimizer.resolve(&file, backend.seed, ObjectiveConfig::joint())?,
        settings: d.settings,
    };
    let session = Session::new(backend)?;
    let generator = session.candidate_generator();
    let rows = run_sweep(
        &cfg,
        session.evaluator(&task, DEFAULT_ECE_BINS),
        generator.as_ref(),
        &prompt,
        &data,
        Some(&a.out),
    )?;
    let agg = aggregate(&rows, &cfg.settings);
    for r in &agg {
        log::info!(
            "{}: acc_end {}, flip_end {}",
            r.setting,
            r.acc_end.map_or("n/a".into(), |m| m.to_string()),
            r.flip_end.map_or("n/a".into(), |m| m.to_string())
        );
    }
    write_csv(
        &a.out.join("sweep.csv"),
        &rows,
        &[
            "task",
            "model",
            "setting",
            "seed",
            "acc_start",
            "acc_end",
            "flip_start",
            "flip_end",
            "flip_end_fresh",
            "iterations",
            "status",
        ],
    )?;
    let fmt = |m: Option<promptstab_core::optimizer::sweep::MeanStd>| m.map_or(String::new(), |m| m.to_string());
    let table: Vec<[String; 7]> = agg
        .iter()
        .map(|r| {
            [
                r.setting.clone(),
                r.n_ok.to_string(),
                fmt(r.acc_start),
                fmt(r.acc_end),
                fmt(r.flip_start),
                fmt(r.flip_end),
                fmt(r.flip_end_fresh),
            ]
        })
        .collect();
    write_csv(
        &a.out.join("sweep_aggregate.csv"),
        &table,
        &["setting", "n_ok", "acc_start", "acc_end", "flip_start", "flip_end", "flip_end_fresh"],
    )?;
    let any_ok = rows.iter().any(|r| r.status == "ok");
    write_json(
        a.out.join("sweep.json"),
        &SweepOutput {
            meta: Meta::new(&task, &data),
            backend: session.settings.clone(),
            config: cfg,
            rows,
            aggregate: agg,
        },
    )?;
    Ok(any_ok)
}

// ---------------------------------------------------------------------------
// report

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output directories of earlier commands.
    #[arg(long = "input", num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct Report {
    tool: String,
    version: String,
    sources: Vec<Source>,
}

#[derive(Debug, Default, Serialize)]
struct Source {
    path: String,
    eval: Option<EvalOverview>,
    conformal: Option<ConformalOverview>,
    analysis: Option<StratifiedReport>,
    optimize: Option<OptimizeOverview>,
    sweep: Option<Vec<AggregateRow>>,
}

#[derive(Debug, Serialize)]
struct EvalOverview {
    meta: Meta,
    prompt_id: String,
    n_examples: usize,
    n_invalid_base: usize,
    k: usize,
    accuracy: f64,
    macro_f1: f64,
    mean_flip_rate: f64,
    log_loss: Option<f64>,
    brier: Option<f64>,
    ece: Option<f64>,
    mce: Option<f64>,
    mean_jsd: Option<f64>,
}

#[derive(Debug, Serialize)]
struct ConformalOverview {
    alpha: f64,
    threshold: Option<f64>,
    n_cal: usize,
    n_eval: usize,
    coverage: f64,
    mean_set_size: f64,
}

#[derive(Debug, Serialize)]
struct OptimizeOverview {
    initial_prompt_id: String,
    final_prompt_id: String,
    final_prompt: String,
    start: promptstab_core::optimizer::Snapshot,
    end: promptstab_core::optimizer::Snapshot,
    flip_end_insample: f64,
    flip_end_fresh: f64,
    iterations: usize,
}

#[derive(Debug, Serialize)]
struct SummaryRow<'a> {
    source: &'a str,
    prompt_id: &'a str,
    n_examples: usize,
    accuracy: f64,
    macro_f1: f64,
    mean_flip_rate: f64,
    ece: Option<f64>,
    brier: Option<f64>,
    log_loss: Option<f64>,
}

#[derive(Debug, Serialize)]
struct CurveRow<'a> {
    source: &'a str,
    coverage: f64,
    selective_accuracy: f64,
    threshold: Option<f64>,
}

#[derive(Debug, Serialize)]
struct TrajectoryRow<'a> {
    source: &'a str,
    iteration: usize,
    role: &'a str,
    prompt_id: &'a str,
    j: f64,
    accuracy: f64,
    flip_rate: f64,
    accepted: bool,
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let mut sources = Vec::new();
    let mut eval_rows = Vec::new();
    let mut curves = Vec::new();
    let mut runs = Vec::new();
    let mut labels = Vec::new();
    for dir in &a.inputs {
        if !dir.is_dir() {
            bail!("{} is not a directory", dir.display());
        }
        labels.push(dir.display().to_string());
    }
    for (dir, label) in a.inputs.iter().zip(&labels) {
        let mut s = Source {
            path: label.clone(),
            ..Default::default()
        };
        let p = dir.join("summary.json");
        if p.exists() {
            let e = load_eval_report(&p)?;
            let m = &e.summary;
            eval_rows.push((label.as_str(), m.clone()));
            s.eval = Some(EvalOverview {
                meta: e.meta.clone(),
                prompt_id: m.prompt_id.clone(),
                n_examples: m.n_examples,
                n_invalid_base: m.n_invalid_base,
                k: m.k,
                accuracy: m.accuracy,
                macro_f1: m.macro_f1,
                mean_flip_rate: m.mean_flip_rate,
                log_loss: m.log_loss,
                brier: m.brier,
                ece: m.ece,
                mce: m.mce,
                mean_jsd: m.mean_jsd,
            });
        }
        let p = dir.join("conformal.json");
        if p.exists() {
            let c: ConformalOutput = read_json(&p)?;
            s.conformal = Some(ConformalOverview {
                alpha: c.report.alpha,
                threshold: c.report.threshold.is_finite().then_some(c.report.threshold),
                n_cal: c.report.n_cal,
                n_eval: c.report.n_eval,
                coverage: c.report.coverage,
                mean_set_size: c.report.mean_set_size,
            });
            curves.push((label.as_str(), c.report.curve));
        }
        let p = dir.join("analysis.json");
        if p.exists() {
            let an: AnalysisOutput = read_json(&p)?;
            s.analysis = Some(an.report);
        }
        let p = dir.join("result.json");
        if p.exists() {
            let r: RunOutcome = read_json(&p)?;
            s.optimize = Some(OptimizeOverview {
                initial_prompt_id: r.initial_prompt_id.clone(),
                final_prompt_id: r.final_prompt.id.clone(),
                final_prompt: r.final_prompt.text.clone(),
                start: r.start,
                end: r.end,
                flip_end_insample: r.flip_end_insample,
                flip_end_fresh: r.flip_end_fresh,
                iterations: r.iterations,
            });
            runs.push((label.as_str(), r.trajectory));
        }
        let p = dir.join("sweep.json");
        if p.exists() {
            let sw: SweepOutput = read_json(&p)?;
            s.sweep = Some(sw.aggregate);
        }
        if s.eval.is_none()
            && s.conformal.is_none()
            && s.analysis.is_none()
            && s.optimize.is_none()
            && s.sweep.is_none()
        {
            bail!("{} contains no promptstab artifacts", dir.display());
        }
        sources.push(s);
    }

    write_json(
        a.out.join("report.json"),
        &Report {
            tool: "promptstab".into(),
            version: VERSION.into(),
            sources,
        },
    )?;
    let summary_rows: Vec<SummaryRow> = eval_rows
        .iter()
        .map(|(src, m)| SummaryRow {
            source: src,
            prompt_id: &m.prompt_id,
            n_examples: m.n_examples,
            accuracy: m.accuracy,
            macro_f1: m.macro_f1,
            mean_flip_rate: m.mean_flip_rate,
            ece: m.ece,
            brier: m.brier,
            log_loss: m.log_loss,
        })
        .collect();
    write_csv(
        &a.out.join("summaries.csv"),
        &summary_rows,
        &["source", "prompt_id", "n_examples", "accuracy", "macro_f1", "mean_flip_rate", "ece", "brier", "log_loss"],
    )?;
    let curve_rows: Vec<CurveRow> = curves
        .iter()
        .flat_map(|(src, c)| {
            c.iter().map(move |p| CurveRow {
                source: src,
                coverage: p.coverage,
                selective_accuracy: p.selective_accuracy,
                threshold: p.threshold,
            })
        })
        .collect();
    write_csv(
        &a.out.join("coverage_curve.csv"),
        &curve_rows,
        &["source", "coverage", "selective_accuracy", "threshold"],
    )?;
    let mut traj_rows = Vec::new();
    for (src, traj) in &runs {
        for it in traj {
            traj_rows.push(TrajectoryRow {
                source: src,
                iteration: it.iteration,
                role: "incumbent",
                prompt_id: &it.incumbent_prompt_id,
                j: it.incumbent_j,
                accuracy: it.incumbent_accuracy,
                flip_rate: it.incumbent_flip_rate,
                accepted: false,
            });
            for (i, c) in it.candidates.iter().enumerate() {
                traj_rows.push(TrajectoryRow {
                    source: src,
                    iteration: it.iteration,
                    role: "candidate",
                    prompt_id: &c.prompt_id,
                    j: c.j,
                    accuracy: c.accuracy,
                    flip_rate: c.flip_rate,
                    accepted: it.accepted && it.best_candidate == Some(i),
                });
            }
        }
    }
    write_csv(
        &a.out.join("trajectory.csv"),
        &traj_rows,
        &["source", "iteration", "role", "prompt_id", "j", "accuracy", "flip_rate", "accepted"],
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// synth

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Comma-separated label set.
    #[arg(long, value_delimiter = ',', default_value = "Yes,No")]
    pub labels: Vec<String>,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Writes `task.json`, `data.jsonl` and a starter `prompt.txt`.
pub fn synth(a: &SynthArgs) -> Result<()> {
    let labels: Vec<&str> = a.labels.iter().map(String::as_str).collect();
    let task = Task::new(
        "synthetic",
        labels.iter().map(|l| l.to_string()).collect(),
        vec!["note".into()],
    )?;
    let data = synthetic::dataset(&task, a.n, a.seed);
    write_json(a.out.join("task.json"), &task)?;
    write_atomic(a.out.join("data.jsonl"), data.to_jsonl().as_bytes())?;
    let prompt = format!(
        "Read the clinical note and answer with one of: {}.\nNote: {{note}}\n",
        labels.join(", ")
    );
    write_atomic(a.out.join("prompt.txt"), prompt.as_bytes())?;
    Ok(())
}
