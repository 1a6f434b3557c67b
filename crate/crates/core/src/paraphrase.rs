//! K semantically equivalent variants of a base prompt.
//!
//! Variants come from a [`Paraphraser`] (rule-based mock or LLM) or from a
//! variant file. Every accepted variant keeps the base placeholder set, and no
//! two members of `{base} ∪ variants` share text.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::backend::{ChatMessage, Predictor};
use crate::domain::{Prompt, PromptVariantSet, Provenance};
use crate::error::{Error, Result};
use crate::hashing::hash_u64;
use crate::io::parse_string_list;

pub const DEFAULT_K: usize = 3;
pub const META_PROMPT_VERSION: &str = "paraphrase-meta-v1";
pub const META_PROMPT: &str = include_str!("../resources/paraphrase_meta_v1.txt");
/// Proposal rounds before giving up on reaching K valid variants.
pub const MAX_ATTEMPTS: u32 = 4;

pub trait Paraphraser: Send + Sync {
    /// Identity used in the variant cache key.
    fn name(&self) -> &str;

    /// Raw candidate texts; validation happens in [`VariantGenerator`].
    fn propose(&self, base: &Prompt, k: usize, seed: u64, attempt: u32) -> Result<Vec<String>>;
}

/// Deterministic rewrite rules: politeness wrapper, determiner swap, clause
/// rotation, imperative to interrogative, and a few framing wrappers.
#[derive(Debug, Clone, Default)]
pub struct MockParaphraser;

fn lower_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) if f.is_uppercase() && c.clone().next().is_some_and(|n| n.is_lowercase()) => {
            f.to_lowercase().chain(c).collect()
        }
        Some(f) => std::iter::once(f).chain(c).collect(),
        None => String::new(),
    }
}

fn sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let chars: Vec<char> = text.chars().collect();
    for (i, &ch) in chars.iter().enumerate() {
        cur.push(ch);
        if matches!(ch, '.' | '?' | '!') && chars.get(i + 1).is_none_or(|n| n.is_whitespace()) {
            out.push(cur.trim().to_string());
            cur.clear();
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn swap_determiners(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        let swapped = match word.as_str() {
            "the" => "a",
            "The" => "A",
            "a" => "the",
            "A" => "The",
            "an" => "the",
            "An" => "The",
            w => w,
        };
        out.push_str(swapped);
        word.clear();
    };
    for ch in text.chars() {
        if ch.is_alphabetic() {
            word.push(ch);
        } else {
            flush(&mut word, &mut out);
            out.push(ch);
        }
    }
    flush(&mut word, &mut out);
    out
}

type Rule = fn(&str) -> String;

fn rule_polite(t: &str) -> String {
    if t.starts_with("Please") {
        t.to_string()
    } else {
        format!("Please {}", lower_first(t))
    }
}

fn rule_rotate(t: &str) -> String {
    let mut s = sentences(t);
    if s.len() > 1 {
        s.rotate_left(1);
    }
    s.join(" ")
}

fn rule_question(t: &str) -> String {
    let body = t.trim_end().trim_end_matches(['.', '!']);
    format!("Could you {}?", lower_first(body))
}

fn rule_task_frame(t: &str) -> String {
    format!("Task: {t}")
}

fn rule_brief(t: &str) -> String {
    format!("{t} Keep the answer short.")
}

fn rule_instruction_frame(t: &str) -> String {
    format!("Instructions follow. {t}")
}

const RULES: &[Rule] = &[
    rule_polite,
    swap_determiners,
    rule_rotate,
    rule_question,
    rule_task_frame,
    rule_brief,
    rule_instruction_frame,
];

impl Paraphraser for MockParaphraser {
    fn name(&self) -> &str {
        "mock-rules-v1"
    }

    fn propose(&self, base: &Prompt, k: usize, seed: u64, attempt: u32) -> Result<Vec<String>> {
        let mut order: Vec<usize> = (0..RULES.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(hash_u64(&[&seed.to_le_bytes(), base.text.as_bytes()]));
        order.shuffle(&mut rng);
        // singles first, then ordered pairs; each attempt looks further down the list
        let mut combos: Vec<Vec<usize>> = order.iter().map(|&i| vec![i]).collect();
        for &a in &order {
            for &b in &order {
                if a != b {
                    combos.push(vec![a, b]);
                }
            }
        }
        let take = (k * (attempt as usize + 2)).min(combos.len());
        Ok(combos[..take]
            .iter()
            .map(|c| c.iter().fold(base.text.clone(), |t, &r| RULES[r](&t)))
            .collect())
    }
}

/// Asks a chat model for paraphrases using [`META_PROMPT`].
pub struct LlmParaphraser {
    predictor: Arc<Predictor>,
    name: String,
}

impl LlmParaphraser {
    pub fn new(predictor: Arc<Predictor>) -> Self {
        let name = format!("llm:{}:{}", predictor.model().name(), META_PROMPT_VERSION);
        LlmParaphraser { predictor, name }
    }

    pub fn meta_prompt(base: &Prompt, k: usize) -> String {
        META_PROMPT
            .replace("<<K>>", &k.to_string())
            .replace("<<PROMPT>>", &base.text)
    }
}

impl Paraphraser for LlmParaphraser {
    fn name(&self) -> &str {
        &self.name
    }

    fn propose(&self, base: &Prompt, k: usize, seed: u64, attempt: u32) -> Result<Vec<String>> {
        let msg = ChatMessage::user(Self::meta_prompt(base, k));
        let text = self
            .predictor
            .complete(&[msg], seed.wrapping_add(u64::from(attempt)))?;
        Ok(parse_string_list(&text))
    }
}

/// Validating, caching front end over a [`Paraphraser`].
pub struct VariantGenerator {
    paraphraser: Box<dyn Paraphraser>,
    cache: Mutex<HashMap<(String, usize, u64), Vec<String>>>,
}

impl VariantGenerator {
    pub fn new(paraphraser: Box<dyn Paraphraser>) -> Self {
        VariantGenerator {
            paraphraser,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn mock() -> Self {
        VariantGenerator::new(Box::new(MockParaphraser))
    }

    pub fn name(&self) -> &str {
        self.paraphraser.name()
    }

    /// Exactly `k` placeholder-preserving variants, distinct from the base and
    /// from each other. Cached on (base text, k, seed).
    pub fn generate_variants(&self, base: &Prompt, k: usize, seed: u64) -> Result<PromptVariantSet> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let key = (base.text.clone(), k, seed);
        let cached = self.cache.lock().expect("variant cache").get(&key).cloned();
        let texts = match cached {
            Some(t) => t,
            None => {
                let t = self.collect(base, k, seed)?;
                self.cache.lock().expect("variant cache").insert(key, t.clone());
                t
            }
        };
        let variants = texts
            .into_iter()
            .enumerate()
            .map(|(i, text)| Prompt {
                id: format!("{}~v{}", base.id, i + 1),
                text,
                provenance: Provenance::ParaphraseOf {
                    parent: base.id.clone(),
                },
            })
            .collect();
        PromptVariantSet::new(base.clone(), variants)
    }

    fn collect(&self, base: &Prompt, k: usize, seed: u64) -> Result<Vec<String>> {
        let wanted = base.placeholders();
        let mut seen: BTreeSet<String> = BTreeSet::from([base.text.clone()]);
        let mut out = Vec::with_capacity(k);
        for attempt in 0..MAX_ATTEMPTS {
            for text in self.paraphraser.propose(base, k, seed, attempt)? {
                if out.len() == k {
                    break;
                }
                let text = text.trim().to_string();
                if text.is_empty() || crate::domain::placeholders(&text) != wanted {
                    log::debug!("rejecting variant without matching placeholders: {text:?}");
                    continue;
                }
                if seen.insert(text.clone()) {
                    out.push(text);
                }
            }
            if out.len() == k {
                return Ok(out);
            }
        }
        Err(Error::VariantGenerationFailed {
            requested: k,
            obtained: out.len(),
        })
    }
}

#[derive(Deserialize)]
struct FilePrompt {
    #[serde(default)]
    id: Option<String>,
    text: String,
    #[serde(default)]
    provenance: Option<Provenance>,
}

#[derive(Deserialize)]
struct VariantFile {
    base: FilePrompt,
    variants: Vec<FilePrompt>,
}

/// Read `{base: {...}, variants: [{...}]}`. Ids default to `base` / `base~vN`
/// and variant provenance defaults to paraphrase-of(base).
pub fn load_variants(path: impl AsRef<Path>) -> Result<PromptVariantSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: VariantFile = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
    let base_id = file.base.id.unwrap_or_else(|| "base".into());
    let base = Prompt {
        id: base_id.clone(),
        text: file.base.text,
        provenance: file.base.provenance.unwrap_or(Provenance::Manual),
    };
    let variants = file
        .variants
        .into_iter()
        .enumerate()
        .map(|(i, v)| Prompt {
            id: v.id.unwrap_or_else(|| format!("{base_id}~v{}", i + 1)),
            text: v.text,
            provenance: v.provenance.unwrap_or(Provenance::ParaphraseOf {
                parent: base_id.clone(),
            }),
        })
        .collect();
    PromptVariantSet::new(base, variants)
}

pub fn save_variants(set: &PromptVariantSet, path: impl AsRef<Path>) -> Result<()> {
    crate::io::write_json(path, set)
}
