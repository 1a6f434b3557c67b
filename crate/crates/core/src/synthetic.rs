//! Seeded synthetic data: tasks and datasets for the mock backend, and
//! record generators with known calibration / correlation structure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{Dataset, EvalRecord, Example, Prediction, Task};

const SNIPPETS: &[&str] = &[
    "Patient reports intermittent numbness in the left hand.",
    "MRI shows two new periventricular lesions since last visit.",
    "No relapses documented over the past 24 months.",
    "Gait has declined steadily without discrete attacks.",
    "Started on disease-modifying therapy after optic neuritis.",
    "EDSS recorded as 3.5 at the most recent visit.",
    "Family history is negative for demyelinating disease.",
    "Symptoms resolved fully after a course of steroids.",
];

/// Task with the given labels and a single `note` input field.
pub fn task(id: &str, labels: &[&str]) -> Task {
    Task::new(
        id,
        labels.iter().map(|l| l.to_string()).collect(),
        vec!["note".into()],
    )
    .expect("synthetic task is valid")
}

pub fn binary_task() -> Task {
    task("synthetic-binary", &["Yes", "No"])
}

/// `n` examples with ids `ex0000..`, gold labels cycling through the label set.
pub fn dataset(task: &Task, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..n)
        .map(|i| {
            let a = SNIPPETS[rng.random_range(0..SNIPPETS.len())];
            let b = SNIPPETS[rng.random_range(0..SNIPPETS.len())];
            Example {
                id: format!("ex{i:04}"),
                inputs: [("note".to_string(), format!("{a} {b}"))].into(),
                gold_label: task.label_set[i % task.label_set.len()].clone(),
                metadata: Default::default(),
            }
        })
        .collect();
    Dataset::new(examples)
}

fn binary_record(id: usize, gold: &str, p_yes: f64) -> EvalRecord {
    let labels = ["Yes".to_string(), "No".to_string()];
    let pred = Prediction::from_probs(&labels, &[p_yes, 1.0 - p_yes], "").expect("valid");
    EvalRecord {
        example_id: format!("r{id:05}"),
        gold_label: gold.into(),
        correct: pred.label == gold,
        base_prediction: pred,
        variant_predictions: Vec::new(),
        flip: false,
        flip_rate: 0.0,
        margin: None,
        conformal_set: None,
        covered: None,
    }
}

/// Binary records with `p(Yes) ~ U(0,1)` and gold `Yes` drawn with probability
/// `p(Yes)`: the predictor is perfectly calibrated and exchangeable.
pub fn calibrated_binary_records(n: usize, seed: u64) -> Vec<EvalRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let p: f64 = rng.random();
            let gold = if rng.random::<f64>() < p { "Yes" } else { "No" };
            binary_record(i, gold, p)
        })
        .collect()
}

/// `(confidence, correct)` with confidence `~ U(0.5, 1)` and correctness drawn
/// with probability `confidence - gap`. `gap = 0` is perfectly calibrated.
pub fn confidence_pairs(n: usize, gap: f64, seed: u64) -> Vec<(f64, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let c: f64 = rng.random_range(0.5..1.0);
            let ok = rng.random::<f64>() < (c - gap).clamp(0.0, 1.0);
            (c, ok)
        })
        .collect()
}

/// Records with flip rate in `{0, 1/3, 2/3, 1}` and a conformal set of size
/// `1 + round(2 * flip_rate)` plus ±1 noise with probability `noise`
/// (clamped to [1, 3] labels).
pub fn planted_flip_setsize_records(n: usize, noise: f64, seed: u64) -> Vec<EvalRecord> {
    let labels = ["A", "B", "C"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let flips = rng.random_range(0..=3usize);
            let flip_rate = flips as f64 / 3.0;
            let mut size = 1 + (2.0 * flip_rate).round() as i64;
            if rng.random::<f64>() < noise {
                size += if rng.random::<bool>() { 1 } else { -1 };
            }
            let size = size.clamp(1, 3) as usize;
            let mut r = binary_record(i, "Yes", 0.7);
            r.flip_rate = flip_rate;
            r.flip = flips > 0;
            r.conformal_set = Some(labels[..size].iter().map(|s| s.to_string()).collect());
            r.covered = Some(true);
            r
        })
        .collect()
}
