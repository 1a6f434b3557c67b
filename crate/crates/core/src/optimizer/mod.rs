//! Dual-objective prompt optimization: evaluate the incumbent, collect
//! failures, propose candidates, accept the best strictly improving one.

pub mod candidates;
pub mod rundir;
pub mod sweep;

use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, EvalSummary, ObjectiveConfig, Prompt};
use crate::error::{Error, Result};
use crate::evaluate::Evaluator;
use crate::hashing::hash_u64;

pub use candidates::{
    generate_candidates, CandidateContext, CandidateGenerator, LlmCandidateGenerator,
    MockCandidateGenerator,
};
pub use rundir::RunDir;

/// Objective gaps at or below this are ties. Absorbs rounding so that the
/// bounded and negative stability forms rank identically.
pub const IMPROVEMENT_TOL: f64 = 1e-12;
/// Input text per failure excerpt, in characters.
pub const EXCERPT_CHARS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StabilityForm {
    /// S = 1 - flip_rate
    Bounded,
    /// S = -flip_rate
    Negative,
}

pub fn objective_value(accuracy: f64, flip_rate: f64, cfg: &ObjectiveConfig, form: StabilityForm) -> f64 {
    let s = match form {
        StabilityForm::Bounded => 1.0 - flip_rate,
        StabilityForm::Negative => -flip_rate,
    };
    cfg.lambda_perf * accuracy + cfg.lambda_stab * s
}

/// J = λ_perf · accuracy + λ_stab · (1 − mean flip rate).
pub fn objective(summary: &EvalSummary, cfg: &ObjectiveConfig) -> f64 {
    objective_value(summary.accuracy, summary.mean_flip_rate, cfg, StabilityForm::Bounded)
}

pub fn improves(candidate: f64, incumbent: f64) -> bool {
    candidate > incumbent + IMPROVEMENT_TOL
}

/// Index of the best score; ties go to the lowest index.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    let mut best = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some(b) if !improves(s, scores[b]) => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Indices by descending score, ties in index order.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        if (scores[a] - scores[b]).abs() <= IMPROVEMENT_TOL {
            std::cmp::Ordering::Equal
        } else {
            scores[b].total_cmp(&scores[a])
        }
    });
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub objective: ObjectiveConfig,
    pub k_variants: usize,
    pub n_candidates: usize,
    pub max_iterations: usize,
    /// Stop after this many consecutive iterations without acceptance.
    pub patience: usize,
    pub n_failure_examples: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            objective: ObjectiveConfig::joint(),
            k_variants: 3,
            n_candidates: 4,
            max_iterations: 10,
            patience: 3,
            n_failure_examples: 5,
            seed: 1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("k_variants", self.k_variants),
            ("n_candidates", self.n_candidates),
            ("max_iterations", self.max_iterations),
            ("patience", self.patience),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureExcerpt {
    pub example_id: String,
    pub input: String,
    pub gold_label: String,
    pub base_label: String,
    pub variant_labels: Vec<String>,
    pub flip_rate: f64,
}

impl FailureExcerpt {
    pub fn render(&self) -> String {
        format!(
            "- [{}] gold={} predicted={} variants=[{}] flip_rate={:.2}\n  input: {}",
            self.example_id,
            self.gold_label,
            self.base_label,
            self.variant_labels.join(", "),
            self.flip_rate,
            self.input
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Failures {
    pub high_flip: Vec<FailureExcerpt>,
    pub misclassified: Vec<FailureExcerpt>,
}

fn truncate_chars(s: &str, n: usize) -> String {
    match s.char_indices().nth(n) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}

/// High-flip examples by descending flip rate (ties by id) and misclassified
/// examples in dataset order, each list cut to `n`.
pub fn identify_failures(summary: &EvalSummary, dataset: &Dataset, n: usize) -> Failures {
    let excerpt = |r: &crate::domain::EvalRecord| {
        let input = dataset
            .get(&r.example_id)
            .map(|ex| {
                ex.inputs
                    .iter()
                    .map(|(k, v)| format!("{k}: {v}"))
                    .collect::<Vec<_>>()
                    .join("; ")
            })
            .unwrap_or_default();
        FailureExcerpt {
            example_id: r.example_id.clone(),
            input: truncate_chars(&input, EXCERPT_CHARS),
            gold_label: r.gold_label.clone(),
            base_label: r.base_prediction.label.clone(),
            variant_labels: r.variant_predictions.iter().map(|p| p.label.clone()).collect(),
            flip_rate: r.flip_rate,
        }
    };
    let mut flips: Vec<_> = summary.records.iter().filter(|r| r.flip_rate > 0.0).collect();
    flips.sort_by(|a, b| {
        b.flip_rate
            .total_cmp(&a.flip_rate)
            .then_with(|| a.example_id.cmp(&b.example_id))
    });
    Failures {
        high_flip: flips.into_iter().take(n).map(excerpt).collect(),
        misclassified: summary
            .records
            .iter()
            .filter(|r| !r.correct)
            .take(n)
            .map(excerpt)
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub prompt_id: String,
    pub j: f64,
    pub accuracy: f64,
    pub flip_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub incumbent_prompt_id: String,
    pub incumbent_j: f64,
    pub incumbent_accuracy: f64,
    pub incumbent_flip_rate: f64,
    pub candidates: Vec<CandidateScore>,
    pub best_candidate: Option<usize>,
    pub accepted: bool,
    /// Prediction requests issued during the iteration, cache hits included.
    pub requests: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub accuracy: f64,
    pub flip_rate: f64,
    pub j: f64,
}

impl Snapshot {
    fn of(s: &EvalSummary, cfg: &ObjectiveConfig) -> Self {
        Snapshot {
            accuracy: s.accuracy,
            flip_rate: s.mean_flip_rate,
            j: objective(s, cfg),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxIterations,
    Patience,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub initial_prompt_id: String,
    pub final_prompt: Prompt,
    pub start: Snapshot,
    pub end: Snapshot,
    /// End flip rate on the paraphrases used during the run.
    pub flip_end_insample: f64,
    /// End flip rate on a freshly seeded paraphrase set.
    pub flip_end_fresh: f64,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub trajectory: Vec<IterationRecord>,
}

pub struct Optimizer<'a> {
    pub evaluator: Evaluator<'a>,
    pub generator: &'a dyn CandidateGenerator,
    pub config: OptimizerConfig,
}

impl Optimizer<'_> {
    fn evaluate(&self, prompt: &Prompt, dataset: &Dataset, dir: Option<&RunDir>) -> Result<EvalSummary> {
        let s = self
            .evaluator
            .evaluate(prompt, dataset, self.config.k_variants, self.config.seed)?;
        if let Some(d) = dir {
            d.save_prompt(prompt)?;
            d.save_summary(&s)?;
        }
        Ok(s)
    }

    fn candidate_seed(&self, iteration: usize) -> u64 {
        hash_u64(&[
            &self.config.seed.to_le_bytes(),
            b"candidates",
            &(iteration as u64).to_le_bytes(),
        ])
    }

    /// Run the loop. With `dir`, every iteration is appended to the trajectory
    /// as it completes; `resume` replays an existing trajectory first.
    pub fn run(
        &self,
        initial: &Prompt,
        dataset: &Dataset,
        dir: Option<&RunDir>,
        resume: bool,
    ) -> Result<RunOutcome> {
        self.config.validate()?;
        let cfg = &self.config.objective;
        let predictor = self.evaluator.predictor;

        let start_summary = self.evaluate(initial, dataset, dir)?;
        let start = Snapshot::of(&start_summary, cfg);

        let mut trajectory = match (dir, resume) {
            (Some(d), true) => d.read_trajectory()?,
            _ => Vec::new(),
        };
        let mut incumbent = initial.clone();
        let mut stale = 0;
        for rec in &trajectory {
            if rec.accepted {
                let best = rec
                    .best_candidate
                    .ok_or_else(|| Error::Config("accepted iteration without a best candidate".into()))?;
                let id = &rec.candidates[best].prompt_id;
                incumbent = dir.expect("resume needs a run dir").load_prompt(id)?;
                stale = 0;
            } else {
                stale += 1;
            }
        }
        if let Some(last) = trajectory.last() {
            log::info!("resuming after iteration {}", last.iteration);
        }
        let mut inc_summary = if incumbent == *initial {
            start_summary
        } else {
            self.evaluate(&incumbent, dataset, dir)?
        };
        let mut inc_j = objective(&inc_summary, cfg);

        let first = trajectory.last().map_or(1, |r| r.iteration + 1);
        for iteration in first..=self.config.max_iterations {
            if stale >= self.config.patience {
                break;
            }
            let before = predictor.requests();
            let failures = identify_failures(&inc_summary, dataset, self.config.n_failure_examples);
            let ctx = CandidateContext {
                current: &incumbent,
                summary: &inc_summary,
                failures: &failures,
                iteration,
            };
            let cands = generate_candidates(
                self.generator,
                &ctx,
                self.config.n_candidates,
                self.candidate_seed(iteration),
            )?;
            let mut summaries = Vec::with_capacity(cands.len());
            for c in &cands {
                summaries.push(self.evaluate(c, dataset, dir)?);
            }
            let scores: Vec<f64> = summaries.iter().map(|s| objective(s, cfg)).collect();
            let best = select_best(&scores);
            let accepted = best.is_some_and(|b| improves(scores[b], inc_j));
            let record = IterationRecord {
                iteration,
                incumbent_prompt_id: incumbent.id.clone(),
                incumbent_j: inc_j,
                incumbent_accuracy: inc_summary.accuracy,
                incumbent_flip_rate: inc_summary.mean_flip_rate,
                candidates: cands
                    .iter()
                    .zip(&summaries)
                    .zip(&scores)
                    .map(|((c, s), &j)| CandidateScore {
                        prompt_id: c.id.clone(),
                        j,
                        accuracy: s.accuracy,
                        flip_rate: s.mean_flip_rate,
                    })
                    .collect(),
                best_candidate: best,
                accepted,
                requests: predictor.requests() - before,
            };
            if let Some(d) = dir {
                d.append_iteration(&record)?;
            }
            log::info!(
                "iteration {iteration}: incumbent J {inc_j:.4}, best candidate J {:.4}, {}",
                best.map_or(f64::NAN, |b| scores[b]),
                if accepted { "accepted" } else { "rejected" }
            );
            trajectory.push(record);
            if accepted {
                let b = best.expect("accepted implies a best candidate");
                incumbent = cands[b].clone();
                inc_summary = summaries.swap_remove(b);
                inc_j = scores[b];
                stale = 0;
            } else {
                stale += 1;
            }
        }

        let fresh_seed = hash_u64(&[&self.config.seed.to_le_bytes(), b"fresh-paraphrases"]);
        let fresh = self
            .evaluator
            .evaluate(&incumbent, dataset, self.config.k_variants, fresh_seed)?;
        let outcome = RunOutcome {
            initial_prompt_id: initial.id.clone(),
            start,
            end: Snapshot::of(&inc_summary, cfg),
            flip_end_insample: inc_summary.mean_flip_rate,
            flip_end_fresh: fresh.mean_flip_rate,
            iterations: trajectory.len(),
            stop_reason: if stale >= self.config.patience {
                StopReason::Patience
            } else {
                StopReason::MaxIterations
            },
            final_prompt: incumbent,
            trajectory,
        };
        if let Some(d) = dir {
            d.write_result(&outcome)?;
        }
        Ok(outcome)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::MockParams;
    use crate::backend::{BackendConfig, Predictor};
    use crate::domain::{EvalRecord, Prediction, Task};
    use crate::paraphrase::VariantGenerator;
    use crate::synthetic;

    fn summary(acc: f64, flip: f64) -> EvalSummary {
        EvalSummary {
            prompt_id: "p".into(),
            n_examples: 10,
            n_invalid_base: 0,
            k: 3,
            accuracy: acc,
            macro_f1: acc,
            mean_flip_rate: flip,
            log_loss: None,
            brier: None,
            ece: None,
            mce: None,
            ece_bins: 10,
            mean_jsd: None,
            records: vec![],
        }
    }

    #[test]
    fn objective_arithmetic() {
        assert_eq!(objective(&summary(0.8, 0.2), &ObjectiveConfig::joint()), 0.8);
        assert_eq!(objective(&summary(0.7, 0.9), &ObjectiveConfig::accuracy_only()), 0.7);
    }

    #[test]
    fn selection_ties_go_low() {
        assert_eq!(select_best(&[0.5, 0.7, 0.7]), Some(1));
        assert_eq!(select_best(&[]), None);
        assert_eq!(rank_by_score(&[0.1, 0.3, 0.3, 0.2]), vec![1, 2, 3, 0]);
        assert!(!improves(0.8, 0.8));
    }

    #[test]
    fn config_validation() {
        let mut c = OptimizerConfig::default();
        c.validate().unwrap();
        c.n_candidates = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    fn rec(id: &str, flip_rate: f64, correct: bool) -> EvalRecord {
        EvalRecord {
            example_id: id.into(),
            gold_label: "Yes".into(),
            base_prediction: Prediction::label_only(if correct { "Yes" } else { "No" }, ""),
            variant_predictions: vec![],
            flip: flip_rate > 0.0,
            flip_rate,
            margin: None,
            correct,
            conformal_set: None,
            covered: None,
        }
    }

    #[test]
    fn failure_lists() {
        let t = synthetic::binary_task();
        let ds = synthetic::dataset(&t, 3, 0);
        let mut s = summary(1.0, 0.0);
        s.records = vec![rec("ex0000", 0.0, true), rec("ex0001", 0.0, true)];
        assert_eq!(identify_failures(&s, &ds, 5), Failures::default());

        s.records = vec![
            rec("ex0002", 0.0, false),
            rec("ex0001", 1.0 / 3.0, true),
            rec("ex0000", 2.0 / 3.0, false),
        ];
        let f = identify_failures(&s, &ds, 5);
        let ids: Vec<_> = f.high_flip.iter().map(|e| e.example_id.as_str()).collect();
        assert_eq!(ids, ["ex0000", "ex0001"]);
        assert_eq!(f.misclassified.len(), 2);
        assert!(f.high_flip[0].input.starts_with("note: "));
        let f1 = identify_failures(&s, &ds, 1);
        assert_eq!((f1.high_flip.len(), f1.misclassified.len()), (1, 1));
    }

    #[test]
    fn excerpt_is_bounded() {
        let long = "x".repeat(2000);
        assert_eq!(truncate_chars(&long, EXCERPT_CHARS).chars().count(), EXCERPT_CHARS + 3);
    }

    struct Fixture {
        predictor: Predictor,
        variants: VariantGenerator,
        task: Task,
        data: Dataset,
    }

    fn fixture(n: usize) -> Fixture {
        let params = MockParams::default();
        Fixture {
            predictor: Predictor::from_config(&BackendConfig::mock(11, params, true), None).unwrap(),
            variants: VariantGenerator::mock(),
            task: synthetic::binary_task(),
            data: synthetic::dataset(&synthetic::binary_task(), n, 2),
        }
    }

    fn initial() -> Prompt {
        Prompt::manual("initial", "Decide whether the note describes a relapse. {note}")
    }

    fn optimizer<'a>(f: &'a Fixture, gen: &'a MockCandidateGenerator, cfg: OptimizerConfig) -> Optimizer<'a> {
        Optimizer {
            evaluator: Evaluator::new(&f.predictor, &f.variants, &f.task),
            generator: gen,
            config: cfg,
        }
    }

    #[test]
    fn candidates_are_distinct_valid_and_deterministic() {
        let s = summary(0.5, 0.5);
        let failures = Failures::default();
        let p = initial();
        let ctx = CandidateContext {
            current: &p,
            summary: &s,
            failures: &failures,
            iteration: 1,
        };
        let a = generate_candidates(&MockCandidateGenerator, &ctx, 6, 3).unwrap();
        let b = generate_candidates(&MockCandidateGenerator, &ctx, 6, 3).unwrap();
        assert_eq!(a, b);
        let texts: std::collections::BTreeSet<_> = a.iter().map(|c| &c.text).collect();
        assert_eq!(texts.len(), 6);
        assert!(a.iter().all(|c| c.placeholders() == p.placeholders() && c.text != p.text));
        assert_eq!(a[2].id, "it1-c2");
    }

    #[test]
    fn loop_invariants() {
        let f = fixture(30);
        let gen = MockCandidateGenerator;
        let opt = optimizer(&f, &gen, OptimizerConfig::default());
        let out = opt.run(&initial(), &f.data, None, false).unwrap();
        let mut last = f64::NEG_INFINITY;
        for r in &out.trajectory {
            assert!(r.requests <= (4 * 4 * 30) as u64);
            if r.accepted {
                let b = r.best_candidate.unwrap();
                assert!(r.candidates[b].j > r.incumbent_j);
            }
            assert!(r.incumbent_j >= last);
            last = r.incumbent_j;
        }
        assert!(out.end.j >= out.start.j);
        assert_eq!(out, opt.run(&initial(), &f.data, None, false).unwrap());
    }

    #[test]
    fn accuracy_only_follows_accuracy_ranking() {
        let f = fixture(30);
        let gen = MockCandidateGenerator;
        let cfg = OptimizerConfig {
            objective: ObjectiveConfig::accuracy_only(),
            ..Default::default()
        };
        let out = optimizer(&f, &gen, cfg).run(&initial(), &f.data, None, false).unwrap();
        for r in &out.trajectory {
            let accs: Vec<f64> = r.candidates.iter().map(|c| c.accuracy).collect();
            assert_eq!(r.best_candidate, select_best(&accs));
        }
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let f = fixture(20);
        let gen = MockCandidateGenerator;
        let cfg = OptimizerConfig {
            max_iterations: 5,
            patience: 5,
            ..Default::default()
        };
        let full_dir = tempfile::tempdir().unwrap();
        let full = optimizer(&f, &gen, cfg.clone())
            .run(&initial(), &f.data, Some(&RunDir::fresh(full_dir.path()).unwrap()), false)
            .unwrap();

        let cut_dir = tempfile::tempdir().unwrap();
        let short = OptimizerConfig {
            max_iterations: 2,
            ..cfg.clone()
        };
        optimizer(&f, &gen, short)
            .run(&initial(), &f.data, Some(&RunDir::fresh(cut_dir.path()).unwrap()), false)
            .unwrap();
        let dir = RunDir::open(cut_dir.path()).unwrap();
        assert_eq!(dir.read_trajectory().unwrap().len(), 2);
        let resumed = optimizer(&f, &gen, cfg).run(&initial(), &f.data, Some(&dir), true).unwrap();
        assert_eq!(resumed, full);
        assert_eq!(dir.read_trajectory().unwrap(), full.trajectory);
    }

    #[test]
    fn torn_trajectory_line_is_ignored() {
        let d = tempfile::tempdir().unwrap();
        let dir = RunDir::fresh(d.path()).unwrap();
        let r = IterationRecord {
            iteration: 1,
            incumbent_prompt_id: "p".into(),
            incumbent_j: 0.5,
            incumbent_accuracy: 0.5,
            incumbent_flip_rate: 0.5,
            candidates: vec![],
            best_candidate: None,
            accepted: false,
            requests: 0,
        };
        dir.append_iteration(&r).unwrap();
        std::fs::OpenOptions::new()
            .append(true)
            .open(d.path().join(rundir::TRAJECTORY_FILE))
            .and_then(|mut f| std::io::Write::write_all(&mut f, b"{\"iteration\": 2, \"incum"))
            .unwrap();
        assert_eq!(dir.read_trajectory().unwrap(), vec![r]);
    }
}
