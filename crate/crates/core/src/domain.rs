//! Core value types: tasks, examples, prompts, predictions and evaluation records.
//!
//! Every type here is an immutable value that serializes to the on-disk
//! formats used by the CLI (task JSON, dataset JSON-lines, variant files,
//! run reports).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Tolerance on the sum of a probability vector.
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

/// Label carried by a variant prediction whose model output could not be mapped
/// onto the label set. Never equal to a real label, so it always counts as a flip.
pub const INVALID_LABEL: &str = "<invalid-output>";

/// Labels compare by exact, case-sensitive equality after trimming.
pub fn normalize_label(label: &str) -> String {
    label.trim().to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTask")]
pub struct Task {
    pub id: String,
    pub label_set: Vec<String>,
    pub input_fields: Vec<String>,
}

#[derive(Deserialize)]
struct RawTask {
    id: String,
    label_set: Vec<String>,
    input_fields: Vec<String>,
}

impl TryFrom<RawTask> for Task {
    type Error = Error;

    fn try_from(raw: RawTask) -> Result<Self> {
        Task::new(raw.id, raw.label_set, raw.input_fields)
    }
}

impl Task {
    pub fn new(
        id: impl Into<String>,
        label_set: Vec<String>,
        input_fields: Vec<String>,
    ) -> Result<Self> {
        let label_set: Vec<String> = label_set.iter().map(|l| normalize_label(l)).collect();
        if label_set.len() < 2 {
            return Err(Error::InvalidTask(format!(
                "label_set needs at least 2 labels, got {}",
                label_set.len()
            )));
        }
        let mut seen = HashSet::new();
        for label in &label_set {
            if label.is_empty() {
                return Err(Error::InvalidTask("empty label".into()));
            }
            if !seen.insert(label.as_str()) {
                return Err(Error::InvalidTask(format!("duplicate label {label:?}")));
            }
        }
        let mut fields = HashSet::new();
        for field in &input_fields {
            if !fields.insert(field.as_str()) {
                return Err(Error::InvalidTask(format!("duplicate input field {field:?}")));
            }
        }
        Ok(Task {
            id: id.into(),
            label_set,
            input_fields,
        })
    }

    pub fn has_label(&self, label: &str) -> bool {
        let label = label.trim();
        self.label_set.iter().any(|l| l == label)
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        let label = label.trim();
        self.label_set.iter().position(|l| l == label)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub inputs: BTreeMap<String, String>,
    pub gold_label: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

/// Ordered collection of examples belonging to one task.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Self {
        Dataset { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    /// Parse JSON-lines; blank lines are skipped, gold labels are trimmed.
    pub fn from_jsonl(text: &str) -> std::result::Result<Self, String> {
        let mut examples = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut ex: Example =
                serde_json::from_str(line).map_err(|e| format!("line {}: {e}", lineno + 1))?;
            ex.gold_label = normalize_label(&ex.gold_label);
            examples.push(ex);
        }
        Ok(Dataset { examples })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            out.push_str(&serde_json::to_string(ex).expect("example serializes"));
            out.push('\n');
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Dataset::from_jsonl(&text).map_err(|m| Error::parse(path, m))
    }

    /// SHA-256 over the canonical JSON-lines encoding.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }
}

/// One failed dataset rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum Violation {
    DuplicateId { example_id: String },
    LabelOutOfSet { example_id: String, label: String },
    MissingInput { example_id: String, field: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId { example_id } => write!(f, "duplicate-id({example_id})"),
            Violation::LabelOutOfSet { example_id, label } => {
                write!(f, "label-out-of-set({example_id}: {label:?})")
            }
            Violation::MissingInput { example_id, field } => {
                write!(f, "missing-input({example_id}: {field})")
            }
        }
    }
}

/// Check every example against the task. Violations are data: an empty
/// result means the dataset is clean.
pub fn validate_dataset(dataset: &Dataset, task: &Task) -> Vec<Violation> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for ex in &dataset.examples {
        if !seen.insert(ex.id.as_str()) {
            out.push(Violation::DuplicateId {
                example_id: ex.id.clone(),
            });
            continue;
        }
        if !task.has_label(&ex.gold_label) {
            out.push(Violation::LabelOutOfSet {
                example_id: ex.id.clone(),
                label: ex.gold_label.clone(),
            });
            continue;
        }
        if let Some(field) = task
            .input_fields
            .iter()
            .find(|f| !ex.inputs.contains_key(f.as_str()))
        {
            out.push(Violation::MissingInput {
                example_id: ex.id.clone(),
                field: field.clone(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Provenance {
    Manual,
    ParaphraseOf { parent: String },
    OptimizerCandidate { iteration: usize, parent: String },
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("valid regex"))
}

/// Named `{field}` slots occurring in a template.
pub fn placeholders(text: &str) -> BTreeSet<String> {
    placeholder_re()
        .captures_iter(text)
        .map(|c| c[1].to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub text: String,
    pub provenance: Provenance,
}

impl Prompt {
    pub fn manual(id: impl Into<String>, text: impl Into<String>) -> Self {
        Prompt {
            id: id.into(),
            text: text.into(),
            provenance: Provenance::Manual,
        }
    }

    pub fn placeholders(&self) -> BTreeSet<String> {
        placeholders(&self.text)
    }

    /// Placeholders must be exactly the task's input fields.
    pub fn validate_for(&self, task: &Task) -> Result<()> {
        let found = self.placeholders();
        let wanted: BTreeSet<String> = task.input_fields.iter().cloned().collect();
        if found != wanted {
            let missing: Vec<_> = wanted.difference(&found).cloned().collect();
            let unknown: Vec<_> = found.difference(&wanted).cloned().collect();
            return Err(Error::InvalidPrompt {
                prompt_id: self.id.clone(),
                reason: format!("missing placeholders {missing:?}, unknown placeholders {unknown:?}"),
            });
        }
        Ok(())
    }

    /// Substitute example inputs into the template.
    pub fn render(&self, example: &Example) -> String {
        placeholder_re()
            .replace_all(&self.text, |c: &regex::Captures| {
                example
                    .inputs
                    .get(&c[1])
                    .cloned()
                    .unwrap_or_else(|| c[0].to_string())
            })
            .into_owned()
    }

    /// Short content-derived identifier.
    pub fn text_digest(text: &str) -> String {
        hex::encode(&Sha256::digest(text.as_bytes())[..6])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawVariantSet")]
pub struct PromptVariantSet {
    pub base: Prompt,
    pub variants: Vec<Prompt>,
}

#[derive(Deserialize)]
struct RawVariantSet {
    base: Prompt,
    variants: Vec<Prompt>,
}

impl TryFrom<RawVariantSet> for PromptVariantSet {
    type Error = Error;

    fn try_from(raw: RawVariantSet) -> Result<Self> {
        PromptVariantSet::new(raw.base, raw.variants)
    }
}

impl PromptVariantSet {
    /// Requires K ≥ 1 and every variant keeping the base placeholder set.
    pub fn new(base: Prompt, variants: Vec<Prompt>) -> Result<Self> {
        if variants.is_empty() {
            return Err(Error::Config("a variant set needs at least one variant".into()));
        }
        let wanted = base.placeholders();
        for (i, v) in variants.iter().enumerate() {
            if v.placeholders() != wanted {
                return Err(Error::PlaceholderMismatch(i));
            }
        }
        Ok(PromptVariantSet { base, variants })
    }

    pub fn k(&self) -> usize {
        self.variants.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    pub probs: Option<BTreeMap<String, f64>>,
    pub raw_output: String,
}

/// Index of the largest probability; ties go to the earliest label.
pub fn argmax_index(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl Prediction {
    pub fn label_only(label: impl Into<String>, raw_output: impl Into<String>) -> Self {
        Prediction {
            label: normalize_label(&label.into()),
            probs: None,
            raw_output: raw_output.into(),
        }
    }

    /// Sentinel for model output that could not be mapped onto the label set.
    pub fn invalid(raw_output: impl Into<String>) -> Self {
        Prediction {
            label: INVALID_LABEL.to_string(),
            probs: None,
            raw_output: raw_output.into(),
        }
    }

    pub fn is_invalid(&self) -> bool {
        self.label == INVALID_LABEL
    }

    /// Build from a probability vector aligned with `label_set`; the label is the argmax.
    pub fn from_probs(
        label_set: &[String],
        probs: &[f64],
        raw_output: impl Into<String>,
    ) -> Result<Self> {
        if probs.len() != label_set.len() {
            return Err(Error::InvalidPrediction(format!(
                "{} probabilities for {} labels",
                probs.len(),
                label_set.len()
            )));
        }
        check_distribution(probs)?;
        let label = label_set[argmax_index(probs)].clone();
        Ok(Prediction {
            label,
            probs: Some(label_set.iter().cloned().zip(probs.iter().copied()).collect()),
            raw_output: raw_output.into(),
        })
    }

    /// Softmax over per-label scores.
    pub fn from_scores(
        label_set: &[String],
        scores: &[f64],
        raw_output: impl Into<String>,
    ) -> Result<Self> {
        Prediction::from_probs(label_set, &softmax(scores), raw_output)
    }

    /// Probabilities in label-set order.
    pub fn prob_vector(&self, label_set: &[String]) -> Option<Vec<f64>> {
        let probs = self.probs.as_ref()?;
        label_set.iter().map(|l| probs.get(l).copied()).collect()
    }

    pub fn prob_of(&self, label: &str) -> Option<f64> {
        self.probs.as_ref().map(|p| p.get(label).copied().unwrap_or(0.0))
    }

    /// Largest class probability.
    pub fn confidence(&self) -> Option<f64> {
        self.probs
            .as_ref()
            .map(|p| p.values().copied().fold(0.0, f64::max))
    }

    pub fn validate(&self, label_set: &[String]) -> Result<()> {
        if !label_set.contains(&self.label) {
            return Err(Error::InvalidPrediction(format!(
                "label {:?} not in label set",
                self.label
            )));
        }
        if let Some(probs) = &self.probs {
            if probs.len() != label_set.len() || label_set.iter().any(|l| !probs.contains_key(l)) {
                return Err(Error::InvalidPrediction(
                    "probabilities must cover exactly the label set".into(),
                ));
            }
            let v = self.prob_vector(label_set).expect("keys checked");
            check_distribution(&v)?;
            let expected = &label_set[argmax_index(&v)];
            if expected != &self.label {
                return Err(Error::InvalidPrediction(format!(
                    "label {:?} is not the argmax {:?}",
                    self.label, expected
                )));
            }
        }
        Ok(())
    }
}

fn check_distribution(probs: &[f64]) -> Result<()> {
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidPrediction(
            "probabilities must be finite and non-negative".into(),
        ));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > PROB_SUM_TOLERANCE {
        return Err(Error::InvalidPrediction(format!(
            "probabilities sum to {total}, not 1"
        )));
    }
    Ok(())
}

/// Outcome for one example across the base prompt and its K variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub example_id: String,
    pub gold_label: String,
    pub base_prediction: Prediction,
    pub variant_predictions: Vec<Prediction>,
    pub flip: bool,
    pub flip_rate: f64,
    pub margin: Option<f64>,
    pub correct: bool,
    #[serde(default)]
    pub conformal_set: Option<Vec<String>>,
    #[serde(default)]
    pub covered: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub prompt_id: String,
    pub n_examples: usize,
    /// Examples dropped because the base prompt produced unmappable output.
    pub n_invalid_base: usize,
    pub k: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub mean_flip_rate: f64,
    pub log_loss: Option<f64>,
    pub brier: Option<f64>,
    pub ece: Option<f64>,
    pub mce: Option<f64>,
    pub ece_bins: usize,
    pub mean_jsd: Option<f64>,
    pub records: Vec<EvalRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawObjective")]
pub struct ObjectiveConfig {
    pub lambda_perf: f64,
    pub lambda_stab: f64,
}

#[derive(Deserialize)]
struct RawObjective {
    lambda_perf: f64,
    lambda_stab: f64,
}

impl TryFrom<RawObjective> for ObjectiveConfig {
    type Error = Error;

    fn try_from(raw: RawObjective) -> Result<Self> {
        ObjectiveConfig::new(raw.lambda_perf, raw.lambda_stab)
    }
}

impl ObjectiveConfig {
    pub fn new(lambda_perf: f64, lambda_stab: f64) -> Result<Self> {
        if !(lambda_perf >= 0.0 && lambda_stab >= 0.0) || lambda_perf + lambda_stab <= 0.0 {
            return Err(Error::Config(format!(
                "lambda weights must be non-negative with positive sum, got ({lambda_perf}, {lambda_stab})"
            )));
        }
        Ok(ObjectiveConfig {
            lambda_perf,
            lambda_stab,
        })
    }

    pub fn accuracy_only() -> Self {
        ObjectiveConfig {
            lambda_perf: 1.0,
            lambda_stab: 0.0,
        }
    }

    pub fn joint() -> Self {
        ObjectiveConfig {
            lambda_perf: 0.5,
            lambda_stab: 0.5,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn yes_no() -> Task {
        Task::new("t", vec!["Yes".into(), "No".into()], vec!["text".into()]).unwrap()
    }

    fn ex(id: &str, gold: &str) -> Example {
        Example {
            id: id.into(),
            inputs: [("text".to_string(), "x".to_string())].into(),
            gold_label: gold.into(),
            metadata: BTreeMap::new(),
        }
    }

    #[test]
    fn duplicate_ids_are_reported() {
        let ds = Dataset::new(vec![ex("e1", "Yes"), ex("e1", "No")]);
        assert_eq!(
            validate_dataset(&ds, &yes_no()),
            vec![Violation::DuplicateId {
                example_id: "e1".into()
            }]
        );
    }

    #[test]
    fn out_of_set_label_is_reported() {
        let ds = Dataset::new(vec![ex("e1", "Yes"), ex("e2", "Maybe")]);
        let v = validate_dataset(&ds, &yes_no());
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].to_string(), "label-out-of-set(e2: \"Maybe\")");
    }

    #[test]
    fn clean_dataset_has_no_violations() {
        let ds = Dataset::new(vec![ex("a", "Yes"), ex("b", "No"), ex("c", "Yes")]);
        assert!(validate_dataset(&ds, &yes_no()).is_empty());
    }

    #[test]
    fn missing_input_field() {
        let mut e = ex("a", "Yes");
        e.inputs.clear();
        let v = validate_dataset(&Dataset::new(vec![e]), &yes_no());
        assert!(matches!(v[0], Violation::MissingInput { .. }));
    }

    #[test]
    fn task_rejects_bad_label_sets() {
        assert!(Task::new("t", vec!["A".into()], vec![]).is_err());
        assert!(Task::new("t", vec!["A".into(), " A ".into()], vec![]).is_err());
        let t: std::result::Result<Task, _> =
            serde_json::from_str(r#"{"id":"t","label_set":["A"],"input_fields":[]}"#);
        assert!(t.is_err());
    }

    #[test]
    fn label_match_trims_but_keeps_case() {
        let t = yes_no();
        assert!(t.has_label("  Yes "));
        assert!(!t.has_label("yes"));
    }

    #[test]
    fn prompt_placeholders_must_match_fields() {
        let t = yes_no();
        assert!(Prompt::manual("p", "Classify: {text}").validate_for(&t).is_ok());
        assert!(Prompt::manual("p", "Classify").validate_for(&t).is_err());
        assert!(Prompt::manual("p", "{text} {other}").validate_for(&t).is_err());
    }

    #[test]
    fn render_substitutes_inputs() {
        let p = Prompt::manual("p", "Q: {text}? {text}");
        assert_eq!(p.render(&ex("a", "Yes")), "Q: x? x");
    }

    #[test]
    fn softmax_of_two_scores() {
        let labels = vec!["Yes".to_string(), "No".to_string()];
        let p = Prediction::from_scores(&labels, &[2.0, 0.0], "").unwrap();
        let e2 = 2f64.exp();
        assert!((p.prob_of("Yes").unwrap() - e2 / (e2 + 1.0)).abs() < 1e-9);
        assert!((p.prob_of("No").unwrap() - 1.0 / (e2 + 1.0)).abs() < 1e-9);
        assert_eq!(p.label, "Yes");
    }

    #[test]
    fn prediction_probability_tolerance() {
        let labels = vec!["A".to_string(), "B".to_string()];
        assert!(Prediction::from_probs(&labels, &[0.5, 0.5 + 5e-7], "").is_ok());
        assert!(Prediction::from_probs(&labels, &[0.5, 0.5 + 5e-6], "").is_err());
        assert!(Prediction::from_probs(&labels, &[1.5, -0.5], "").is_err());
    }

    #[test]
    fn argmax_ties_prefer_earlier_label() {
        let labels = vec!["B".to_string(), "A".to_string()];
        let p = Prediction::from_probs(&labels, &[0.5, 0.5], "").unwrap();
        assert_eq!(p.label, "B");
        assert!(p.validate(&labels).is_ok());
    }

    #[test]
    fn validate_rejects_non_argmax_label() {
        let labels = vec!["A".to_string(), "B".to_string()];
        let mut p = Prediction::from_probs(&labels, &[0.3, 0.7], "").unwrap();
        p.label = "A".into();
        assert!(p.validate(&labels).is_err());
    }

    #[test]
    fn objective_config_requires_positive_weight() {
        assert!(ObjectiveConfig::new(0.0, 0.0).is_err());
        assert!(ObjectiveConfig::new(-1.0, 2.0).is_err());
        assert!(ObjectiveConfig::new(1.0, 0.0).is_ok());
    }

    #[test]
    fn variant_set_requires_matching_placeholders() {
        let base = Prompt::manual("b", "Read {text}.");
        let good = Prompt::manual("v1", "Please read {text}.");
        let bad = Prompt::manual("v2", "Please read.");
        assert!(PromptVariantSet::new(base.clone(), vec![good.clone()]).is_ok());
        assert!(matches!(
            PromptVariantSet::new(base.clone(), vec![good, bad]),
            Err(Error::PlaceholderMismatch(1))
        ));
        assert!(PromptVariantSet::new(base, vec![]).is_err());
    }
}
