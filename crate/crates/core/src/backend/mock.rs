//! Deterministic planted-structure model used for offline verification.
//!
//! A prompt carries a quality score `q` and a stability score `s`, both in
//! [0, 1], derived from a seeded hash of its text plus a bonus for each
//! distinct scenario token it contains. Each example has a difficulty `d`
//! from a seeded hash of its id. The gold label receives probability
//! `logistic(a*q - b*d)`; the rest of the mass is spread evenly over the
//! other labels.
//!
//! A paraphrase variant is scored with its anchor's `q` and `s`, plus a
//! logit perturbation `noise_scale * c * (1 - s) * eta` where `eta` is a
//! standard normal drawn from `hash(seed, variant text, example id)`. Low
//! stability prompts therefore flip more, and examples near the decision
//! boundary flip first.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::domain::{Example, Prediction, Prompt, Task};
use crate::error::{Error, Result};
use crate::hashing::{hex_digest, unit};

use super::{BackendError, Model, PredictRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScenario {
    /// Tokens that raise prompt quality.
    pub good_tokens: Vec<String>,
    /// Tokens that raise prompt stability.
    pub stable_tokens: Vec<String>,
    /// Score added per distinct scenario token present.
    pub token_bonus: f64,
    /// Weight of the hashed component of each score.
    pub hash_weight: f64,
    /// Logit scale of the paraphrase perturbation before `c * (1 - s)`.
    pub noise_scale: f64,
}

impl Default for MockScenario {
    fn default() -> Self {
        MockScenario {
            good_tokens: vec!["evidence".into(), "criteria".into()],
            stable_tokens: vec!["exactly".into(), "strictly".into()],
            token_bonus: 0.3,
            hash_weight: 0.4,
            noise_scale: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockParams {
    /// `a`
    pub quality_scale: f64,
    /// `b`
    pub difficulty_scale: f64,
    /// `c`
    pub instability_scale: f64,
    #[serde(default)]
    pub scenario: MockScenario,
}

impl Default for MockParams {
    fn default() -> Self {
        MockParams {
            quality_scale: 4.0,
            difficulty_scale: 2.0,
            instability_scale: 0.8,
            scenario: MockScenario::default(),
        }
    }
}

impl MockParams {
    pub fn new(a: f64, b: f64, c: f64) -> Result<Self> {
        let p = MockParams {
            quality_scale: a,
            difficulty_scale: b,
            instability_scale: c,
            scenario: MockScenario::default(),
        };
        p.validate()?;
        Ok(p)
    }

    /// a, b > 0 and 0 ≤ c ≤ 1. `b = 0` is accepted as the difficulty-free limit.
    pub fn validate(&self) -> Result<()> {
        if !(self.quality_scale > 0.0) || !(self.difficulty_scale >= 0.0) {
            return Err(Error::Config(format!(
                "mock scales must be positive (a={}, b={})",
                self.quality_scale, self.difficulty_scale
            )));
        }
        if !(0.0..=1.0).contains(&self.instability_scale) {
            return Err(Error::Config(format!(
                "mock instability scale must lie in [0, 1], got {}",
                self.instability_scale
            )));
        }
        let s = &self.scenario;
        if !(s.token_bonus >= 0.0 && s.hash_weight >= 0.0 && s.noise_scale >= 0.0) {
            return Err(Error::Config("mock scenario weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedScores {
    pub quality: f64,
    pub stability: f64,
}

/// Lowercased alphanumeric words of a text.
pub fn words(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn token_count(words: &BTreeSet<String>, tokens: &[String]) -> usize {
    tokens
        .iter()
        .map(|t| t.to_lowercase())
        .collect::<BTreeSet<_>>()
        .iter()
        .filter(|t| words.contains(*t))
        .count()
}

pub fn planted_scores(params: &MockParams, seed: u64, text: &str) -> PlantedScores {
    let s = &params.scenario;
    let w = words(text);
    let seed = seed.to_le_bytes();
    let hq = unit(&[&seed, b"quality", text.as_bytes()]);
    let hs = unit(&[&seed, b"stability", text.as_bytes()]);
    let quality = s.hash_weight * hq + s.token_bonus * token_count(&w, &s.good_tokens) as f64;
    let stability = s.hash_weight * hs + s.token_bonus * token_count(&w, &s.stable_tokens) as f64;
    PlantedScores {
        quality: quality.clamp(0.0, 1.0),
        stability: stability.clamp(0.0, 1.0),
    }
}

pub fn difficulty(seed: u64, example_id: &str) -> f64 {
    unit(&[&seed.to_le_bytes(), b"difficulty", example_id.as_bytes()])
}

/// Standard normal draw keyed on (seed, variant text, example id).
pub fn variant_noise(seed: u64, variant_text: &str, example_id: &str) -> f64 {
    let seed = seed.to_le_bytes();
    let u1 = unit(&[&seed, b"noise-r", variant_text.as_bytes(), example_id.as_bytes()]);
    let u2 = unit(&[&seed, b"noise-theta", variant_text.as_bytes(), example_id.as_bytes()]);
    let r = (-2.0 * (1.0 - u1).ln()).sqrt();
    r * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Gold-label logit before any paraphrase perturbation.
pub fn gold_logit(params: &MockParams, quality: f64, difficulty: f64) -> f64 {
    params.quality_scale * quality - params.difficulty_scale * difficulty
}

/// Prediction from explicit planted scores. `variant_text` is `None` for the
/// base prompt.
pub fn mock_predict_planted(
    params: &MockParams,
    seed: u64,
    scores: PlantedScores,
    task: &Task,
    example: &Example,
    variant_text: Option<&str>,
    wants_probs: bool,
) -> Prediction {
    let d = difficulty(seed, &example.id);
    let mut z = gold_logit(params, scores.quality, d);
    if let Some(text) = variant_text {
        let scale = params.scenario.noise_scale
            * params.instability_scale
            * (1.0 - scores.stability);
        if scale > 0.0 {
            z += scale * variant_noise(seed, text, &example.id);
        }
    }
    let p_gold = logistic(z);
    let labels = &task.label_set;
    let gold = task
        .label_index(&example.gold_label)
        .expect("example label validated against task");
    let rest = (1.0 - p_gold) / (labels.len() - 1) as f64;
    let probs: Vec<f64> = (0..labels.len())
        .map(|i| if i == gold { p_gold } else { rest })
        .collect();
    let pred = Prediction::from_probs(labels, &probs, "").expect("mock distribution is valid");
    let raw = pred.label.clone();
    if wants_probs {
        Prediction {
            raw_output: raw,
            ..pred
        }
    } else {
        Prediction::label_only(pred.label, raw)
    }
}

/// Prediction for `prompt`. When `anchor` is given, `prompt` is treated as a
/// paraphrase of it: scores come from the anchor, noise from the variant text.
pub fn mock_predict(
    params: &MockParams,
    seed: u64,
    task: &Task,
    prompt: &Prompt,
    anchor: Option<&Prompt>,
    example: &Example,
    wants_probs: bool,
) -> Prediction {
    match anchor {
        Some(base) if base.text != prompt.text => {
            let scores = planted_scores(params, seed, &base.text);
            mock_predict_planted(params, seed, scores, task, example, Some(&prompt.text), wants_probs)
        }
        _ => {
            let scores = planted_scores(params, seed, &prompt.text);
            mock_predict_planted(params, seed, scores, task, example, None, wants_probs)
        }
    }
}

/// [`Model`] wrapper around [`mock_predict`].
#[derive(Debug, Clone)]
pub struct MockModel {
    params: MockParams,
    seed: u64,
    wants_probs: bool,
    name: String,
}

impl MockModel {
    pub fn new(params: MockParams, seed: u64, wants_probs: bool) -> Result<Self> {
        params.validate()?;
        let encoded = serde_json::to_string(&params)?;
        let name = format!(
            "mock-{}",
            &hex_digest(&[encoded.as_bytes(), &seed.to_le_bytes()])[..16]
        );
        Ok(MockModel {
            params,
            seed,
            wants_probs,
            name,
        })
    }

    pub fn params(&self) -> &MockParams {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl Model for MockModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn wants_probs(&self) -> bool {
        self.wants_probs
    }

    fn temperature(&self) -> f64 {
        0.0
    }

    fn is_remote(&self) -> bool {
        false
    }

    fn predict_uncached(
        &self,
        task: &Task,
        req: &PredictRequest<'_>,
    ) -> std::result::Result<Prediction, BackendError> {
        Ok(mock_predict(
            &self.params,
            self.seed,
            task,
            req.prompt,
            req.anchor,
            req.example,
            self.wants_probs,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn task() -> Task {
        Task::new("t", vec!["Yes".into(), "No".into()], vec!["text".into()]).unwrap()
    }

    fn examples(n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                id: format!("ex{i}"),
                inputs: [("text".to_string(), format!("case {i}"))].into(),
                gold_label: if i % 2 == 0 { "Yes".into() } else { "No".into() },
                metadata: Default::default(),
            })
            .collect()
    }

    #[test]
    fn seeded_mock_is_deterministic() {
        let params = MockParams::default();
        let p = Prompt::manual("p", "Classify {text}");
        let ex = &examples(1)[0];
        let a = mock_predict(&params, 7, &task(), &p, None, ex, true);
        let b = mock_predict(&params, 7, &task(), &p, None, ex, true);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_instability_never_flips() {
        let params = MockParams::new(4.0, 2.0, 0.0).unwrap();
        let base = Prompt::manual("p", "Classify {text}");
        let v = Prompt::manual("v", "Please classify {text}");
        for ex in examples(100) {
            let b = mock_predict(&params, 3, &task(), &base, None, &ex, true);
            let w = mock_predict(&params, 3, &task(), &v, Some(&base), &ex, true);
            assert_eq!(b, w);
        }
    }

    #[test]
    fn no_difficulty_large_quality_is_always_right() {
        let mut params = MockParams::new(1000.0, 1.0, 0.0).unwrap();
        params.difficulty_scale = 0.0;
        let base = Prompt::manual("p", "Classify the evidence in {text}");
        for ex in examples(50) {
            let pred = mock_predict(&params, 1, &task(), &base, None, &ex, true);
            assert_eq!(pred.label, ex.gold_label);
        }
    }

    #[test]
    fn planted_stability_lowers_flip_rate() {
        let params = MockParams::new(4.0, 2.0, 0.8).unwrap();
        let t = task();
        let exs = examples(200);
        let flip_rate = |s: f64| {
            let scores = PlantedScores {
                quality: 0.5,
                stability: s,
            };
            let mut flips = 0usize;
            for ex in &exs {
                let base = mock_predict_planted(&params, 11, scores, &t, ex, None, true);
                for k in 0..3 {
                    let v = mock_predict_planted(
                        &params,
                        11,
                        scores,
                        &t,
                        ex,
                        Some(&format!("variant {k}")),
                        true,
                    );
                    flips += usize::from(v.label != base.label);
                }
            }
            flips as f64 / (3 * exs.len()) as f64
        };
        assert!(flip_rate(0.9) < flip_rate(0.1));
    }

    #[test]
    fn label_only_mode_drops_probs() {
        let p = Prompt::manual("p", "Classify {text}");
        let pred = mock_predict(
            &MockParams::default(),
            1,
            &task(),
            &p,
            None,
            &examples(1)[0],
            false,
        );
        assert!(pred.probs.is_none());
        assert!(task().has_label(&pred.label));
    }

    #[test]
    fn scenario_tokens_raise_scores() {
        let params = MockParams::default();
        let plain = planted_scores(&params, 1, "Classify {text}");
        let tuned = planted_scores(&params, 1, "Classify {text} using the evidence strictly");
        assert!(tuned.quality >= 0.3);
        assert!(tuned.stability >= 0.3);
        assert!(plain.quality <= 0.4 && plain.stability <= 0.4);
    }

    #[test]
    fn multiclass_distribution_is_valid() {
        let t = Task::new(
            "ms",
            vec!["A".into(), "B".into(), "C".into()],
            vec!["text".into()],
        )
        .unwrap();
        let ex = Example {
            id: "e".into(),
            inputs: [("text".to_string(), "x".to_string())].into(),
            gold_label: "C".into(),
            metadata: Default::default(),
        };
        let p = Prompt::manual("p", "Classify {text}");
        let pred = mock_predict(&MockParams::default(), 2, &t, &p, None, &ex, true);
        pred.validate(&t.label_set).unwrap();
    }

    proptest! {
        #[test]
        fn gold_probability_is_monotone_in_logit(q1 in 0.0f64..1.0, q2 in 0.0f64..1.0, d in 0.0f64..1.0) {
            let params = MockParams::default();
            let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
            prop_assert!(logistic(gold_logit(&params, lo, d)) <= logistic(gold_logit(&params, hi, d)));
        }

        #[test]
        fn noise_is_pure(text in "[a-z ]{1,20}", id in "[a-z0-9]{1,8}", seed in any::<u64>()) {
            prop_assert_eq!(variant_noise(seed, &text, &id), variant_noise(seed, &text, &id));
        }
    }
}
