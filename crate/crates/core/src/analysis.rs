//! Stability-conditioned uncertainty: stable vs unstable groups, rank
//! correlations, and margin distributions per flip-rate value.

use serde::{Deserialize, Serialize};

use crate::domain::{EvalRecord, EvalSummary};
use crate::error::{Error, Result};
use crate::metrics::{spearman, Correlation};

/// Flip rates closer than this are the same table row.
const FLIP_RATE_TOL: f64 = 1e-9;

/// A correlation that may be missing for a stated reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum CorrelationResult {
    Value { rho: f64, p_value: f64 },
    Degenerate { reason: String },
    Absent { reason: String },
}

impl CorrelationResult {
    pub fn rho(&self) -> Option<f64> {
        match self {
            CorrelationResult::Value { rho, .. } => Some(*rho),
            _ => None,
        }
    }

    fn from_spearman(xs: &[f64], ys: &[f64]) -> Self {
        match spearman(xs, ys) {
            Ok(Correlation { rho, p_value }) => CorrelationResult::Value { rho, p_value },
            Err(e @ (Error::Degenerate(_) | Error::TooFewRecords { .. })) => {
                CorrelationResult::Degenerate {
                    reason: e.to_string(),
                }
            }
            Err(e) => CorrelationResult::Absent {
                reason: e.to_string(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub n: usize,
    /// Over group members that carry a conformal set.
    pub n_with_sets: usize,
    pub mean_set_size: Option<f64>,
    pub coverage: Option<f64>,
    pub mean_margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginRow {
    pub flip_rate: f64,
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedReport {
    pub n: usize,
    pub n_stable: usize,
    pub n_unstable: usize,
    /// `None` when the group is empty.
    pub stable: Option<GroupStats>,
    pub unstable: Option<GroupStats>,
    pub mean_set_size: Option<f64>,
    pub spearman_flip_setsize: CorrelationResult,
    pub spearman_margin_fliprate: CorrelationResult,
    pub margin_by_fliprate_bins: Option<Vec<MarginRow>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub prompt_id: String,
    pub accuracy: f64,
    pub mean_flip_rate: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn group_stats(records: &[&EvalRecord]) -> Option<GroupStats> {
    if records.is_empty() {
        return None;
    }
    let with_sets: Vec<&EvalRecord> = records
        .iter()
        .copied()
        .filter(|r| r.conformal_set.is_some())
        .collect();
    Some(GroupStats {
        n: records.len(),
        n_with_sets: with_sets.len(),
        mean_set_size: mean(with_sets.iter().map(|r| set_size(r))),
        coverage: mean(
            with_sets
                .iter()
                .map(|r| f64::from(u8::from(r.covered.unwrap_or(false)))),
        ),
        mean_margin: mean(records.iter().filter_map(|r| r.margin)),
    })
}

fn set_size(r: &EvalRecord) -> f64 {
    r.conformal_set.as_ref().map_or(0.0, |s| s.len() as f64)
}

/// Stable (`flip = false`) vs unstable groups plus the two rank correlations.
/// Set-size statistics only use records carrying a conformal set, which the
/// caller restricts to the evaluation half.
pub fn stratify(records: &[EvalRecord]) -> Result<StratifiedReport> {
    if records.is_empty() {
        return Err(Error::EmptyInput("records"));
    }
    let (unstable, stable): (Vec<&EvalRecord>, Vec<&EvalRecord>) =
        records.iter().partition(|r| r.flip);

    let with_sets: Vec<&EvalRecord> = records.iter().filter(|r| r.conformal_set.is_some()).collect();
    let spearman_flip_setsize = if with_sets.is_empty() {
        CorrelationResult::Absent {
            reason: "no conformal sets".into(),
        }
    } else {
        let flips: Vec<f64> = with_sets.iter().map(|r| r.flip_rate).collect();
        let sizes: Vec<f64> = with_sets.iter().map(|r| set_size(r)).collect();
        CorrelationResult::from_spearman(&flips, &sizes)
    };

    let with_margin: Vec<&EvalRecord> = records.iter().filter(|r| r.margin.is_some()).collect();
    let (spearman_margin_fliprate, margin_by_fliprate_bins) = if with_margin.len() < records.len() {
        (
            CorrelationResult::Absent {
                reason: "margins unavailable".into(),
            },
            None,
        )
    } else {
        let margins: Vec<f64> = with_margin.iter().filter_map(|r| r.margin).collect();
        let flips: Vec<f64> = with_margin.iter().map(|r| r.flip_rate).collect();
        (
            CorrelationResult::from_spearman(&margins, &flips),
            Some(margin_flip_table(records)?),
        )
    };

    Ok(StratifiedReport {
        n: records.len(),
        n_stable: stable.len(),
        n_unstable: unstable.len(),
        stable: group_stats(&stable),
        unstable: group_stats(&unstable),
        mean_set_size: mean(with_sets.iter().map(|r| set_size(r))),
        spearman_flip_setsize,
        spearman_margin_fliprate,
        margin_by_fliprate_bins,
    })
}

/// Linear-interpolation quantile (type 7) of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// One row per distinct flip-rate value, ascending, with margin five-number summary.
pub fn margin_flip_table(records: &[EvalRecord]) -> Result<Vec<MarginRow>> {
    let mut pairs = Vec::with_capacity(records.len());
    for r in records {
        let m = r
            .margin
            .ok_or_else(|| Error::MissingMargin(r.example_id.clone()))?;
        pairs.push((r.flip_rate, m));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let mut rows = Vec::new();
    let mut i = 0;
    while i < pairs.len() {
        let key = pairs[i].0;
        let mut j = i;
        while j < pairs.len() && (pairs[j].0 - key).abs() <= FLIP_RATE_TOL {
            j += 1;
        }
        let mut ms: Vec<f64> = pairs[i..j].iter().map(|p| p.1).collect();
        ms.sort_by(f64::total_cmp);
        rows.push(MarginRow {
            flip_rate: key,
            count: ms.len(),
            min: ms[0],
            q1: quantile_sorted(&ms, 0.25),
            median: quantile_sorted(&ms, 0.5),
            q3: quantile_sorted(&ms, 0.75),
            max: ms[ms.len() - 1],
        });
        i = j;
    }
    Ok(rows)
}

pub fn prompt_scatter(summaries: &[EvalSummary]) -> Vec<ScatterRow> {
    summaries
        .iter()
        .map(|s| ScatterRow {
            prompt_id: s.prompt_id.clone(),
            accuracy: s.accuracy,
            mean_flip_rate: s.mean_flip_rate,
        })
        .collect()
}
