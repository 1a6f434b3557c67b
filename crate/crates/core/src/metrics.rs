//! Performance, calibration and sensitivity statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::domain::{EvalRecord, Prediction};
use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking logs.
pub const LOG_EPS: f64 = 1e-12;
pub const DEFAULT_ECE_BINS: usize = 10;

pub fn accuracy(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("accuracy over zero records"));
    }
    Ok(records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroF1 {
    pub value: f64,
    pub per_label: BTreeMap<String, f64>,
    /// Labels with neither predictions nor gold instances; they count as F1 = 0.
    pub absent_labels: Vec<String>,
}

pub fn macro_f1(records: &[EvalRecord], label_set: &[String]) -> Result<MacroF1> {
    if records.is_empty() {
        return Err(Error::EmptyInput("macro-F1 over zero records"));
    }
    let mut per_label = BTreeMap::new();
    let mut absent = Vec::new();
    let mut total = 0.0;
    for label in label_set {
        let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
        for r in records {
            let pred = r.base_prediction.label == *label;
            let gold = r.gold_label == *label;
            match (pred, gold) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fnn += 1,
                _ => {}
            }
        }
        let denom = 2 * tp + fp + fnn;
        let f1 = if denom == 0 {
            absent.push(label.clone());
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        };
        per_label.insert(label.clone(), f1);
        total += f1;
    }
    Ok(MacroF1 {
        value: total / label_set.len() as f64,
        per_label,
        absent_labels: absent,
    })
}

fn gold_prob(r: &EvalRecord) -> Result<f64> {
    r.base_prediction
        .prob_of(&r.gold_label)
        .ok_or_else(|| Error::MissingProbs(r.example_id.clone()))
}

/// Mean negative log-probability of the gold label.
pub fn log_loss(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("log-loss over zero records"));
    }
    let mut sum = 0.0;
    for r in records {
        sum -= gold_prob(r)?.clamp(LOG_EPS, 1.0 - LOG_EPS).ln();
    }
    Ok(sum / records.len() as f64)
}

/// Multi-class Brier score: mean squared distance to the one-hot gold vector.
pub fn brier(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("Brier score over zero records"));
    }
    let mut sum = 0.0;
    for r in records {
        let probs = r
            .base_prediction
            .probs
            .as_ref()
            .ok_or_else(|| Error::MissingProbs(r.example_id.clone()))?;
        let mut gold_seen = false;
        for (label, p) in probs {
            let target = if *label == r.gold_label {
                gold_seen = true;
                1.0
            } else {
                0.0
            };
            sum += (p - target).powi(2);
        }
        if !gold_seen {
            sum += 1.0;
        }
    }
    Ok(sum / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Absent for empty bins.
    pub mean_confidence: Option<f64>,
    pub empirical_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub ece: f64,
    pub mce: f64,
    pub bins: Vec<ReliabilityBin>,
}

/// ECE/MCE over `(confidence, correct)` pairs with equal-width bins on [0, 1].
/// Bin `i` holds confidences in `[i/n, (i+1)/n)`; confidence 1.0 goes in the last bin.
pub fn calibration_from_pairs(pairs: &[(f64, bool)], n_bins: usize) -> Result<Calibration> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("calibration over zero records"));
    }
    if n_bins == 0 {
        return Err(Error::Config("n_bins must be at least 1".into()));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut hit = vec![0usize; n_bins];
    for &(c, ok) in pairs {
        let idx = ((c * n_bins as f64).floor() as usize).min(n_bins - 1);
        count[idx] += 1;
        conf_sum[idx] += c;
        hit[idx] += usize::from(ok);
    }
    let n = pairs.len() as f64;
    let mut ece = 0.0;
    let mut mce: f64 = 0.0;
    let bins = (0..n_bins)
        .map(|i| {
            let (mean_confidence, empirical_accuracy) = if count[i] > 0 {
                let conf = conf_sum[i] / count[i] as f64;
                let acc = hit[i] as f64 / count[i] as f64;
                let gap = (acc - conf).abs();
                ece += count[i] as f64 / n * gap;
                mce = mce.max(gap);
                (Some(conf), Some(acc))
            } else {
                (None, None)
            };
            ReliabilityBin {
                lower: i as f64 / n_bins as f64,
                upper: (i + 1) as f64 / n_bins as f64,
                count: count[i],
                mean_confidence,
                empirical_accuracy,
            }
        })
        .collect();
    Ok(Calibration { ece, mce, bins })
}

/// ECE and MCE with confidence = top-class probability.
pub fn ece_mce(records: &[EvalRecord], n_bins: usize) -> Result<Calibration> {
    let pairs = records
        .iter()
        .map(|r| {
            r.base_prediction
                .confidence()
                .map(|c| (c, r.correct))
                .ok_or_else(|| Error::MissingProbs(r.example_id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    calibration_from_pairs(&pairs, n_bins)
}

/// Top-1 minus top-2 class probability.
pub fn margin(prediction: &Prediction) -> Result<f64> {
    let probs = prediction
        .probs
        .as_ref()
        .ok_or_else(|| Error::MissingProbs(prediction.label.clone()))?;
    let mut v: Vec<f64> = probs.values().copied().collect();
    v.sort_by(|a, b| b.total_cmp(a));
    Ok(match v.as_slice() {
        [] => 0.0,
        [only] => *only,
        [a, b, ..] => a - b,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipStat {
    pub flip: bool,
    pub flip_rate: f64,
}

/// Per-example flip indicator and flip rate of K variant label lists against
/// the base labels. Only labels are compared.
pub fn flip_stats<S: AsRef<str>>(base: &[S], variants: &[Vec<S>]) -> Result<Vec<FlipStat>> {
    if variants.is_empty() {
        return Err(Error::EmptyInput("flip statistics need at least one variant"));
    }
    for v in variants {
        if v.len() != base.len() {
            return Err(Error::LengthMismatch {
                expected: base.len(),
                got: v.len(),
            });
        }
    }
    let k = variants.len();
    Ok(base
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let disagreements = variants
                .iter()
                .filter(|v| v[i].as_ref() != b.as_ref())
                .count();
            FlipStat {
                flip: disagreements > 0,
                flip_rate: disagreements as f64 / k as f64,
            }
        })
        .collect())
}

/// Symmetric pairwise disagreement across M ≥ 2 aligned prompt label lists.
pub fn pss<S: AsRef<str>>(predictions_per_prompt: &[Vec<S>]) -> Result<Vec<f64>> {
    let m = predictions_per_prompt.len();
    if m < 2 {
        return Err(Error::EmptyInput("PSS needs at least two prompts"));
    }
    let n = predictions_per_prompt[0].len();
    if let Some(bad) = predictions_per_prompt.iter().find(|p| p.len() != n) {
        return Err(Error::LengthMismatch {
            expected: n,
            got: bad.len(),
        });
    }
    let pairs = (m * (m - 1) / 2) as f64;
    Ok((0..n)
        .map(|i| {
            let mut disagree = 0usize;
            for a in 0..m {
                for b in a + 1..m {
                    if predictions_per_prompt[a][i].as_ref() != predictions_per_prompt[b][i].as_ref() {
                        disagree += 1;
                    }
                }
            }
            disagree as f64 / pairs
        })
        .collect())
}

fn kl2(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, mi)| pi * (pi / mi).log2())
        .sum()
}

/// Base-2 Jensen–Shannon divergence of aligned probability vectors.
pub fn jsd_vec(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::MismatchedSupport);
    }
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok((0.5 * (kl2(p, &m) + kl2(q, &m))).clamp(0.0, 1.0))
}

/// Base-2 Jensen–Shannon divergence of two distributions keyed by label.
pub fn jsd(p: &BTreeMap<String, f64>, q: &BTreeMap<String, f64>) -> Result<f64> {
    if p.len() != q.len() || p.keys().any(|k| !q.contains_key(k)) {
        return Err(Error::MismatchedSupport);
    }
    let pv: Vec<f64> = p.values().copied().collect();
    let qv: Vec<f64> = p.keys().map(|k| q[k]).collect();
    jsd_vec(&pv, &qv)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    pub p_value: f64,
}

/// 1-based ranks with ties averaged.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with a two-sided t-approximation p-value.
/// A constant input is reported as [`Error::Degenerate`], never as ρ = 0.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if xs.len() < 3 {
        return Err(Error::TooFewRecords {
            needed: 3,
            got: xs.len(),
        });
    }
    let rho = pearson(&average_ranks(xs), &average_ranks(ys))
        .ok_or(Error::Degenerate("constant input to rank correlation"))?;
    let df = (xs.len() - 2) as f64;
    let p_value = if (1.0 - rho.abs()) < 1e-15 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
    };
    Ok(Correlation { rho, p_value })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn labels() -> Vec<String> {
        vec!["Yes".into(), "No".into()]
    }

    fn rec(gold: &str, pred: Prediction) -> EvalRecord {
        EvalRecord {
            example_id: "x".into(),
            gold_label: gold.into(),
            correct: pred.label == gold,
            base_prediction: pred,
            variant_predictions: vec![],
            flip: false,
            flip_rate: 0.0,
            margin: None,
            conformal_set: None,
            covered: None,
        }
    }

    fn prob_rec(gold: &str, p_yes: f64) -> EvalRecord {
        rec(gold, Prediction::from_probs(&labels(), &[p_yes, 1.0 - p_yes], "").unwrap())
    }

    #[test]
    fn accuracy_cases() {
        let all = vec![prob_rec("Yes", 0.9), prob_rec("No", 0.1)];
        assert_eq!(accuracy(&all).unwrap(), 1.0);
        let mixed = vec![
            prob_rec("Yes", 0.9),
            prob_rec("No", 0.1),
            prob_rec("Yes", 0.8),
            prob_rec("No", 0.7),
        ];
        assert_eq!(accuracy(&mixed).unwrap(), 0.75);
        assert!(accuracy(&[]).is_err());
    }

    #[test]
    fn macro_f1_hand_computed() {
        // Yes: TP=1 FP=1 FN=0 -> 2/3; No: TP=0 FP=0 FN=1 -> 0
        let rs = vec![
            rec("Yes", Prediction::label_only("Yes", "")),
            rec("No", Prediction::label_only("Yes", "")),
        ];
        let f = macro_f1(&rs, &labels()).unwrap();
        assert_abs_diff_eq!(f.value, 1.0 / 3.0, epsilon = 1e-12);
        assert!(f.absent_labels.is_empty());
    }

    #[test]
    fn macro_f1_flags_absent_labels() {
        let rs = vec![rec("Yes", Prediction::label_only("Yes", ""))];
        let f = macro_f1(&rs, &labels()).unwrap();
        assert_eq!(f.absent_labels, vec!["No".to_string()]);
        assert_abs_diff_eq!(f.value, 0.5);
    }

    #[test]
    fn log_loss_and_brier_closed_forms() {
        let perfect = vec![prob_rec("Yes", 1.0), prob_rec("No", 0.0)];
        assert!(log_loss(&perfect).unwrap() < 1e-9);
        assert_eq!(brier(&perfect).unwrap(), 0.0);

        let uniform = vec![prob_rec("Yes", 0.5), prob_rec("No", 0.5)];
        assert_abs_diff_eq!(log_loss(&uniform).unwrap(), 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(brier(&uniform).unwrap(), 0.5, epsilon = 1e-12);

        assert_abs_diff_eq!(brier(&[prob_rec("Yes", 0.8)]).unwrap(), 0.08, epsilon = 1e-12);
        let label_only = vec![rec("Yes", Prediction::label_only("Yes", ""))];
        assert!(matches!(log_loss(&label_only), Err(Error::MissingProbs(_))));
        assert!(matches!(brier(&label_only), Err(Error::MissingProbs(_))));
    }

    #[test]
    fn ece_single_bin() {
        let pairs: Vec<(f64, bool)> = (0..10).map(|i| (0.9, i < 6)).collect();
        let c = calibration_from_pairs(&pairs, 1).unwrap();
        assert_abs_diff_eq!(c.ece, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(c.mce, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn ece_perfect_confidence() {
        let rs = vec![prob_rec("Yes", 1.0), prob_rec("No", 0.0)];
        let c = ece_mce(&rs, 10).unwrap();
        assert_eq!((c.ece, c.mce), (0.0, 0.0));
        assert_eq!(c.bins.iter().map(|b| b.count).sum::<usize>(), 2);
        assert_eq!(c.bins.len(), 10);
        assert_eq!(c.bins[9].count, 2);
    }

    #[test]
    fn margins() {
        let l4: Vec<String> = ["A", "B", "C", "D"].iter().map(|s| s.to_string()).collect();
        assert_eq!(margin(&Prediction::from_probs(&labels(), &[1.0, 0.0], "").unwrap()).unwrap(), 1.0);
        assert_eq!(margin(&Prediction::from_probs(&l4, &[0.25; 4], "").unwrap()).unwrap(), 0.0);
        let l3: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
        assert_abs_diff_eq!(
            margin(&Prediction::from_probs(&l3, &[0.5, 0.3, 0.2], "").unwrap()).unwrap(),
            0.2,
            epsilon = 1e-12
        );
        assert!(margin(&Prediction::label_only("A", "")).is_err());
    }

    #[test]
    fn flip_cases() {
        let base = vec!["A"];
        let s = flip_stats(&base, &[vec!["A"], vec!["A"], vec!["A"]]).unwrap();
        assert_eq!(s[0], FlipStat { flip: false, flip_rate: 0.0 });
        let s = flip_stats(&base, &[vec!["B"], vec!["A"], vec!["B"]]).unwrap();
        assert!(s[0].flip);
        assert_abs_diff_eq!(s[0].flip_rate, 2.0 / 3.0);
        assert!(matches!(
            flip_stats(&base, &[vec!["A", "B"]]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn pss_cases() {
        assert_eq!(pss(&[vec!["A"], vec!["A"], vec!["A"]]).unwrap(), vec![0.0]);
        assert_abs_diff_eq!(pss(&[vec!["A"], vec!["B"], vec!["B"]]).unwrap()[0], 2.0 / 3.0);
        let two = pss(&[vec!["A", "B"], vec!["B", "B"]]).unwrap();
        let flips = flip_stats(&["A", "B"], &[vec!["B", "B"]]).unwrap();
        assert_eq!(two, flips.iter().map(|f| f.flip_rate).collect::<Vec<_>>());
        assert!(pss(&[vec!["A"]]).is_err());
    }

    #[test]
    fn jsd_cases() {
        assert_eq!(jsd_vec(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_abs_diff_eq!(jsd_vec(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0, epsilon = 1e-12);
        // oracle: direct evaluation of the two KL terms against m = (0.75, 0.25)
        let kl_p = 0.5 * (0.5f64 / 0.75).log2() + 0.5 * (0.5f64 / 0.25).log2();
        let kl_q = (1.0f64 / 0.75).log2();
        let oracle = 0.5 * (kl_p + kl_q);
        assert_abs_diff_eq!(oracle, 0.3112781244591328, epsilon = 1e-12);
        assert_abs_diff_eq!(jsd_vec(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), oracle, epsilon = 1e-12);

        let p: BTreeMap<String, f64> = [("Yes".to_string(), 1.0), ("No".to_string(), 0.0)].into();
        let q: BTreeMap<String, f64> = [("Yes".to_string(), 0.0), ("Maybe".to_string(), 1.0)].into();
        assert!(matches!(jsd(&p, &q), Err(Error::MismatchedSupport)));
    }

    #[test]
    fn spearman_cases() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_abs_diff_eq!(spearman(&xs, &[2.0, 4.0, 6.0, 9.0]).unwrap().rho, 1.0);
        assert_abs_diff_eq!(spearman(&xs, &[4.0, 3.0, 2.0, 1.0]).unwrap().rho, -1.0);
        // 1 - 6*2/(4*15) = 0.8
        assert_abs_diff_eq!(spearman(&xs, &[1.0, 3.0, 2.0, 4.0]).unwrap().rho, 0.8, epsilon = 1e-12);
        assert!(matches!(
            spearman(&xs, &[1.0, 1.0, 1.0, 1.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn spearman_p_value_against_reference() {
        // scipy.stats.spearmanr([1..10], [2,1,4,3,6,5,8,7,10,9]) -> rho 0.9393939, p 5.484e-05
        let xs: Vec<f64> = (1..=10).map(f64::from).collect();
        let ys = [2.0, 1.0, 4.0, 3.0, 6.0, 5.0, 8.0, 7.0, 10.0, 9.0];
        let c = spearman(&xs, &ys).unwrap();
        assert_abs_diff_eq!(c.rho, 0.9393939393939394, epsilon = 1e-12);
        assert_abs_diff_eq!(c.p_value, 5.484e-05, epsilon = 1e-7);
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    proptest! {
        #[test]
        fn jsd_symmetric_and_bounded(a in prop::collection::vec(0.0f64..1.0, 3), b in prop::collection::vec(0.0f64..1.0, 3)) {
            let sa: f64 = a.iter().sum::<f64>() + 1e-9;
            let sb: f64 = b.iter().sum::<f64>() + 1e-9;
            let p: Vec<f64> = a.iter().map(|x| x / sa).collect();
            let q: Vec<f64> = b.iter().map(|x| x / sb).collect();
            let d1 = jsd_vec(&p, &q).unwrap();
            let d2 = jsd_vec(&q, &p).unwrap();
            prop_assert!((d1 - d2).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&d1));
        }

        #[test]
        fn brier_is_bounded(ps in prop::collection::vec(0.0f64..=1.0, 1..30), golds in prop::collection::vec(any::<bool>(), 30)) {
            let rs: Vec<EvalRecord> = ps.iter().zip(&golds)
                .map(|(p, g)| prob_rec(if *g { "Yes" } else { "No" }, *p))
                .collect();
            let b = brier(&rs).unwrap();
            prop_assert!((0.0..=2.0).contains(&b));
            let all_onehot_correct = rs.iter().all(|r| r.base_prediction.prob_of(&r.gold_label) == Some(1.0));
            prop_assert_eq!(b == 0.0, all_onehot_correct);
        }

        #[test]
        fn spearman_invariant_under_monotone_maps(xs in prop::collection::vec(-100.0f64..100.0, 5..20), seed in 0u64..1000) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * 0.3 + ((i as u64 * 7919 + seed) % 13) as f64).collect();
            if let Ok(base) = spearman(&xs, &ys) {
                let tx: Vec<f64> = xs.iter().map(|x| x.exp().ln_1p() + 3.0 * x).collect();
                let ty: Vec<f64> = ys.iter().map(|y| y.powi(3)).collect();
                let t = spearman(&tx, &ty).unwrap();
                prop_assert!((base.rho - t.rho).abs() < 1e-9);
            }
        }

        #[test]
        fn pss_zero_iff_flip_zero(
            labels in prop::collection::vec(prop::collection::vec(0u8..3, 4), 2..5)
        ) {
            // labels[m][i]: prompt m, example i; prompt 0 is the anchor
            let as_str: Vec<Vec<String>> = labels.iter().map(|v| v.iter().map(|l| l.to_string()).collect()).collect();
            let p = pss(&as_str).unwrap();
            let f = flip_stats(&as_str[0], &as_str[1..]).unwrap();
            for (pi, fi) in p.iter().zip(&f) {
                prop_assert_eq!(*pi == 0.0, fi.flip_rate == 0.0);
            }
        }
    }
}
