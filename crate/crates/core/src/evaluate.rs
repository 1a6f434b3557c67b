//! Base prompt plus K paraphrases over a dataset, folded into an [`EvalSummary`].

use crate::backend::{BackendError, Predictor};
use crate::domain::{Dataset, EvalRecord, EvalSummary, Prediction, Prompt, PromptVariantSet, Task};
use crate::error::{Error, Result};
use crate::metrics::{self, DEFAULT_ECE_BINS};
use crate::par::Exec;
use crate::paraphrase::VariantGenerator;

#[derive(Clone, Copy)]
pub struct Evaluator<'a> {
    pub predictor: &'a Predictor,
    pub variants: &'a VariantGenerator,
    pub task: &'a Task,
    pub exec: Exec,
    pub ece_bins: usize,
}

type Batch = Vec<std::result::Result<Prediction, BackendError>>;

impl<'a> Evaluator<'a> {
    pub fn new(predictor: &'a Predictor, variants: &'a VariantGenerator, task: &'a Task) -> Self {
        Evaluator {
            predictor,
            variants,
            task,
            exec: Exec::available(),
            ece_bins: DEFAULT_ECE_BINS,
        }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    /// Paraphrase `prompt` (seeded by its text and `seed`) and evaluate.
    pub fn evaluate(&self, prompt: &Prompt, dataset: &Dataset, k: usize, seed: u64) -> Result<EvalSummary> {
        let set = self.variants.generate_variants(prompt, k, seed)?;
        self.evaluate_set(&set, dataset)
    }

    /// Issues exactly `n * (1 + K)` prediction requests.
    pub fn evaluate_set(&self, set: &PromptVariantSet, dataset: &Dataset) -> Result<EvalSummary> {
        let examples = &dataset.examples;
        if examples.is_empty() {
            return Err(Error::EmptyInput("dataset"));
        }
        let base = self
            .predictor
            .predict_batch(self.task, &set.base, None, examples, self.exec)?;
        let variants: Vec<Batch> = set
            .variants
            .iter()
            .map(|v| {
                self.predictor
                    .predict_batch(self.task, v, Some(&set.base), examples, self.exec)
            })
            .collect::<std::result::Result<_, _>>()?;

        let mut kept = Vec::with_capacity(examples.len());
        let mut n_invalid_base = 0;
        for (i, b) in base.into_iter().enumerate() {
            match b {
                Ok(p) => kept.push((i, p)),
                Err(BackendError::InvalidOutput { example_id, .. }) => {
                    log::warn!("base prompt gave unmappable output for {example_id}; excluded");
                    n_invalid_base += 1;
                }
                Err(e) => return Err(e.into()),
            }
        }
        if kept.is_empty() {
            return Err(Error::EmptyInput("every base prediction was invalid"));
        }

        let mut variant_preds: Vec<Vec<Prediction>> = Vec::with_capacity(variants.len());
        for batch in &variants {
            let mut row = Vec::with_capacity(kept.len());
            for &(i, _) in &kept {
                row.push(match &batch[i] {
                    Ok(p) => p.clone(),
                    Err(BackendError::InvalidOutput { raw, .. }) => Prediction::invalid(raw.clone()),
                    Err(e) => return Err(e.clone().into()),
                });
            }
            variant_preds.push(row);
        }

        let base_labels: Vec<&str> = kept.iter().map(|(_, p)| p.label.as_str()).collect();
        let variant_labels: Vec<Vec<&str>> = variant_preds
            .iter()
            .map(|row| row.iter().map(|p| p.label.as_str()).collect())
            .collect();
        let flips = metrics::flip_stats(&base_labels, &variant_labels)?;

        let records: Vec<EvalRecord> = kept
            .iter()
            .zip(&flips)
            .enumerate()
            .map(|(j, ((i, p), f))| {
                let ex = &examples[*i];
                EvalRecord {
                    example_id: ex.id.clone(),
                    gold_label: ex.gold_label.clone(),
                    correct: p.label == ex.gold_label,
                    margin: metrics::margin(p).ok(),
                    base_prediction: p.clone(),
                    variant_predictions: variant_preds.iter().map(|row| row[j].clone()).collect(),
                    flip: f.flip,
                    flip_rate: f.flip_rate,
                    conformal_set: None,
                    covered: None,
                }
            })
            .collect();

        self.summarize(&set.base.id, set.k(), n_invalid_base, records)
    }

    fn summarize(
        &self,
        prompt_id: &str,
        k: usize,
        n_invalid_base: usize,
        records: Vec<EvalRecord>,
    ) -> Result<EvalSummary> {
        let has_probs = records.iter().all(|r| r.base_prediction.probs.is_some());
        let (log_loss, brier, ece, mce) = if has_probs {
            let cal = metrics::ece_mce(&records, self.ece_bins)?;
            (
                Some(metrics::log_loss(&records)?),
                Some(metrics::brier(&records)?),
                Some(cal.ece),
                Some(cal.mce),
            )
        } else {
            (None, None, None, None)
        };
        let mean_jsd = if has_probs { mean_jsd(&records)? } else { None };
        let mean_flip_rate = records.iter().map(|r| r.flip_rate).sum::<f64>() / records.len() as f64;
        Ok(EvalSummary {
            prompt_id: prompt_id.to_string(),
            n_examples: records.len(),
            n_invalid_base,
            k,
            accuracy: metrics::accuracy(&records)?,
            macro_f1: metrics::macro_f1(&records, &self.task.label_set)?.value,
            mean_flip_rate,
            log_loss,
            brier,
            ece,
            mce,
            ece_bins: self.ece_bins,
            mean_jsd,
            records,
        })
    }
}

/// Mean base-vs-variant JSD over every pair where both sides carry probabilities.
fn mean_jsd(records: &[EvalRecord]) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut n = 0usize;
    for r in records {
        let Some(bp) = &r.base_prediction.probs else {
            continue;
        };
        for v in &r.variant_predictions {
            if let Some(vp) = &v.probs {
                total += metrics::jsd(bp, vp)?;
                n += 1;
            }
        }
    }
    Ok((n > 0).then(|| total / n as f64))
}
