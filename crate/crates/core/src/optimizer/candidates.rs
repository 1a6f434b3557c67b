//! Candidate prompt proposals conditioned on the incumbent and its failures.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backend::{ChatMessage, Predictor};
use crate::domain::{placeholders, EvalSummary, Prompt, Provenance};
use crate::error::{Error, Result};
use crate::hashing::hash_u64;
use crate::io::parse_string_list;

use super::{FailureExcerpt, Failures};

pub const META_PROMPT_VERSION: &str = "candidate-meta-v1";
pub const META_PROMPT: &str = include_str!("../../resources/candidate_meta_v1.txt");
pub const MAX_ATTEMPTS: u32 = 4;

pub struct CandidateContext<'a> {
    pub current: &'a Prompt,
    pub summary: &'a EvalSummary,
    pub failures: &'a Failures,
    pub iteration: usize,
}

pub trait CandidateGenerator: Send + Sync {
    fn name(&self) -> &str;

    /// Raw candidate texts; validation happens in [`generate_candidates`].
    fn propose(&self, ctx: &CandidateContext<'_>, n: usize, seed: u64, attempt: u32) -> Result<Vec<String>>;
}

const CLARIFY: &[&str] = &[
    "Base the decision on the evidence stated in the note.",
    "Check the note against the diagnostic criteria before answering.",
    "Weigh all clinical evidence in the note.",
    "Consider only information present in the note.",
    "Pay attention to the timeline of events.",
];

const FORMAT: &[&str] = &[
    "Answer with exactly one label.",
    "Respond strictly with the label name and nothing else.",
    "Return the label only.",
    "Use the label spelling given above.",
];

const NEUTRAL: &[&str] = &[
    "Read carefully.",
    "Take your time.",
    "Focus on the main finding.",
    "Think about the whole note.",
    "Ignore formatting in the note.",
];

/// Rule-based edits: append a clarifying instruction, an output-format
/// constraint, or a neutral sentence. Ignores the failure excerpts.
#[derive(Debug, Clone, Default)]
pub struct MockCandidateGenerator;

impl CandidateGenerator for MockCandidateGenerator {
    fn name(&self) -> &str {
        "mock-edits-v1"
    }

    fn propose(&self, ctx: &CandidateContext<'_>, n: usize, seed: u64, attempt: u32) -> Result<Vec<String>> {
        let text = &ctx.current.text;
        let mut bank: Vec<&str> = CLARIFY
            .iter()
            .chain(FORMAT)
            .chain(NEUTRAL)
            .copied()
            .filter(|s| !text.contains(s))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(hash_u64(&[
            &seed.to_le_bytes(),
            &attempt.to_le_bytes(),
            text.as_bytes(),
        ]));
        bank.shuffle(&mut rng);
        let mut out: Vec<String> = bank.iter().map(|s| format!("{text} {s}")).collect();
        if attempt > 0 {
            for pair in bank.windows(2) {
                out.push(format!("{text} {} {}", pair[0], pair[1]));
            }
        }
        out.truncate(n * (attempt as usize + 1));
        Ok(out)
    }
}

/// Asks a chat model for revisions using [`META_PROMPT`].
pub struct LlmCandidateGenerator {
    predictor: Arc<Predictor>,
    name: String,
}

impl LlmCandidateGenerator {
    pub fn new(predictor: Arc<Predictor>) -> Self {
        let name = format!("llm:{}:{}", predictor.model().name(), META_PROMPT_VERSION);
        LlmCandidateGenerator { predictor, name }
    }

    pub fn meta_prompt(ctx: &CandidateContext<'_>, n: usize) -> String {
        let render = |xs: &[FailureExcerpt]| {
            if xs.is_empty() {
                "(none)".to_string()
            } else {
                xs.iter().map(FailureExcerpt::render).collect::<Vec<_>>().join("\n")
            }
        };
        META_PROMPT
            .replace("<<PROMPT>>", &ctx.current.text)
            .replace("<<ACCURACY>>", &format!("{:.3}", ctx.summary.accuracy))
            .replace("<<FLIP_RATE>>", &format!("{:.3}", ctx.summary.mean_flip_rate))
            .replace("<<HIGH_FLIP>>", &render(&ctx.failures.high_flip))
            .replace("<<MISCLASSIFIED>>", &render(&ctx.failures.misclassified))
            .replace("<<N>>", &n.to_string())
    }
}

impl CandidateGenerator for LlmCandidateGenerator {
    fn name(&self) -> &str {
        &self.name
    }

    fn propose(&self, ctx: &CandidateContext<'_>, n: usize, seed: u64, attempt: u32) -> Result<Vec<String>> {
        let msg = ChatMessage::user(Self::meta_prompt(ctx, n));
        let text = self
            .predictor
            .complete(&[msg], seed.wrapping_add(u64::from(attempt)))?;
        Ok(parse_string_list(&text))
    }
}

/// `n` distinct placeholder-preserving candidates, none equal to the current
/// prompt, with ids `it<iteration>-c<j>`.
pub fn generate_candidates(
    generator: &dyn CandidateGenerator,
    ctx: &CandidateContext<'_>,
    n: usize,
    seed: u64,
) -> Result<Vec<Prompt>> {
    if n == 0 {
        return Err(Error::Config("n_candidates must be at least 1".into()));
    }
    let wanted = ctx.current.placeholders();
    let mut seen = BTreeSet::from([ctx.current.text.clone()]);
    let mut texts = Vec::with_capacity(n);
    'attempts: for attempt in 0..MAX_ATTEMPTS {
        for t in generator.propose(ctx, n, seed, attempt)? {
            let t = t.trim().to_string();
            if t.is_empty() || placeholders(&t) != wanted {
                log::debug!("rejecting candidate with wrong placeholders: {t:?}");
                continue;
            }
            if seen.insert(t.clone()) {
                texts.push(t);
                if texts.len() == n {
                    break 'attempts;
                }
            }
        }
    }
    if texts.len() < n {
        return Err(Error::CandidateGenerationFailed {
            requested: n,
            obtained: texts.len(),
        });
    }
    Ok(texts
        .into_iter()
        .enumerate()
        .map(|(j, text)| Prompt {
            id: format!("it{}-c{}", ctx.iteration, j),
            text,
            provenance: Provenance::OptimizerCandidate {
                iteration: ctx.iteration,
                parent: ctx.current.id.clone(),
            },
        })
        .collect())
}
