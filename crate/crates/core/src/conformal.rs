//! Split conformal prediction sets and selective-prediction curves.
//!
//! Nonconformity is `1 - p(label)`. The threshold is the
//! `ceil((n + 1)(1 - alpha))`-th smallest calibration score, or +inf when that
//! index exceeds `n`. A label enters the set when its score is `<=` the
//! threshold, so sets may be empty.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::domain::{EvalRecord, Prediction};
use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.1;

/// Guards the quantile index against `(n+1)(1-alpha)` landing a hair above an integer.
const INDEX_EPS: f64 = 1e-9;

fn ser_threshold<S: Serializer>(t: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if t.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*t)
    }
}

fn de_threshold<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(x) => Ok(x),
        Raw::Str(s) if s == "inf" => Ok(f64::INFINITY),
        Raw::Str(s) => Err(serde::de::Error::custom(format!("bad threshold {s:?}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConformalModel {
    pub alpha: f64,
    #[serde(serialize_with = "ser_threshold", deserialize_with = "de_threshold")]
    pub threshold: f64,
    pub n_calibration: usize,
}

/// Indices of a seeded 50/50 split: the first `ceil(n/2)` shuffled positions
/// go to calibration. Both halves are returned in ascending order.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_cal = n.div_ceil(2);
    let mut cal = idx[..n_cal].to_vec();
    let mut eval = idx[n_cal..].to_vec();
    cal.sort_unstable();
    eval.sort_unstable();
    (cal, eval)
}

pub fn split_calibration(
    records: &[EvalRecord],
    seed: u64,
) -> Result<(Vec<EvalRecord>, Vec<EvalRecord>)> {
    if records.len() < 2 {
        return Err(Error::TooFewRecords {
            needed: 2,
            got: records.len(),
        });
    }
    if let Some(r) = records.iter().find(|r| r.base_prediction.probs.is_none()) {
        return Err(Error::MissingProbs(r.example_id.clone()));
    }
    let (cal, eval) = split_indices(records.len(), seed);
    Ok((
        cal.into_iter().map(|i| records[i].clone()).collect(),
        eval.into_iter().map(|i| records[i].clone()).collect(),
    ))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// 1-based order-statistic index `ceil((n + 1)(1 - alpha))`.
pub fn quantile_index(n: usize, alpha: f64) -> usize {
    (((n + 1) as f64) * (1.0 - alpha) - INDEX_EPS).ceil().max(1.0) as usize
}

pub fn fit_scores(scores: &[f64], alpha: f64) -> Result<ConformalModel> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(Error::EmptyInput("conformal calibration over zero records"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = quantile_index(sorted.len(), alpha);
    let threshold = if k > sorted.len() {
        f64::INFINITY
    } else {
        sorted[k - 1]
    };
    Ok(ConformalModel {
        alpha,
        threshold,
        n_calibration: sorted.len(),
    })
}

/// Calibrate on `1 - p(gold)` of each record's base prediction.
pub fn fit(calibration: &[EvalRecord], alpha: f64) -> Result<ConformalModel> {
    let scores = calibration
        .iter()
        .map(|r| {
            r.base_prediction
                .prob_of(&r.gold_label)
                .map(|p| 1.0 - p)
                .ok_or_else(|| Error::MissingProbs(r.example_id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    fit_scores(&scores, alpha)
}

/// Labels whose score `1 - p` is within the threshold, in label-set order.
pub fn predict_set(
    model: &ConformalModel,
    prediction: &Prediction,
    label_set: &[String],
) -> Result<Vec<String>> {
    let probs = prediction
        .probs
        .as_ref()
        .ok_or_else(|| Error::MissingProbs(prediction.label.clone()))?;
    Ok(label_set
        .iter()
        .filter(|l| 1.0 - probs.get(*l).copied().unwrap_or(0.0) <= model.threshold)
        .cloned()
        .collect())
}

/// Fill `conformal_set` and `covered` on each record.
pub fn annotate(
    model: &ConformalModel,
    records: &[EvalRecord],
    label_set: &[String],
) -> Result<Vec<EvalRecord>> {
    records
        .iter()
        .map(|r| {
            let set = predict_set(model, &r.base_prediction, label_set)?;
            let mut out = r.clone();
            out.covered = Some(set.contains(&r.gold_label));
            out.conformal_set = Some(set);
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageStats {
    pub coverage: f64,
    pub mean_set_size: f64,
    pub n: usize,
}

pub fn coverage_stats(
    model: &ConformalModel,
    eval_records: &[EvalRecord],
    label_set: &[String],
) -> Result<CoverageStats> {
    if eval_records.is_empty() {
        return Err(Error::EmptyInput("coverage over zero evaluation records"));
    }
    let mut covered = 0usize;
    let mut size = 0usize;
    for r in eval_records {
        let set = predict_set(model, &r.base_prediction, label_set)?;
        covered += usize::from(set.contains(&r.gold_label));
        size += set.len();
    }
    let n = eval_records.len();
    Ok(CoverageStats {
        coverage: covered as f64 / n as f64,
        mean_set_size: size as f64 / n as f64,
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectivePolicy {
    /// Answer when top-class confidence ≥ t, for every distinct confidence t.
    ConfidenceThreshold,
    /// Answer only when the conformal set is a singleton.
    AbstainIfNotSingleton,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Fraction of records answered.
    pub coverage: f64,
    /// Accuracy among answered records.
    pub selective_accuracy: f64,
    /// Confidence threshold for the threshold policy.
    pub threshold: Option<f64>,
}

/// Coverage–accuracy trade-off. The answer-none point is omitted.
pub fn coverage_accuracy_curve(
    records: &[EvalRecord],
    policy: SelectivePolicy,
) -> Result<Vec<CurvePoint>> {
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let n = records.len() as f64;
    match policy {
        SelectivePolicy::ConfidenceThreshold => {
            let mut pairs = records
                .iter()
                .map(|r| {
                    r.base_prediction
                        .confidence()
                        .map(|c| (c, r.correct))
                        .ok_or_else(|| Error::MissingProbs(r.example_id.clone()))
                })
                .collect::<Result<Vec<_>>>()?;
            // descending confidence; sweep answers the top-j block at each distinct value
            pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut points = Vec::new();
            let mut hits = 0usize;
            let mut i = 0;
            while i < pairs.len() {
                let t = pairs[i].0;
                while i < pairs.len() && pairs[i].0 == t {
                    hits += usize::from(pairs[i].1);
                    i += 1;
                }
                points.push(CurvePoint {
                    coverage: i as f64 / n,
                    selective_accuracy: hits as f64 / i as f64,
                    threshold: Some(t),
                });
            }
            points.reverse();
            Ok(points)
        }
        SelectivePolicy::AbstainIfNotSingleton => {
            let mut answered = 0usize;
            let mut hits = 0usize;
            for r in records {
                let set = r
                    .conformal_set
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("record {} has no conformal set", r.example_id)))?;
                if set.len() == 1 {
                    answered += 1;
                    hits += usize::from(r.correct);
                }
            }
            if answered == 0 {
                return Ok(Vec::new());
            }
            Ok(vec![CurvePoint {
                coverage: answered as f64 / n,
                selective_accuracy: hits as f64 / answered as f64,
                threshold: None,
            }])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordSet {
    pub example_id: String,
    pub split: String,
    pub conformal_set: Vec<String>,
    pub covered: bool,
}

/// Contents of `conformal.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalReport {
    pub alpha: f64,
    #[serde(serialize_with = "ser_threshold", deserialize_with = "de_threshold")]
    pub threshold: f64,
    pub n_cal: usize,
    pub n_eval: usize,
    pub split_seed: u64,
    pub coverage: f64,
    pub mean_set_size: f64,
    /// Confidence-threshold sweep on the evaluation half.
    pub curve: Vec<CurvePoint>,
    /// Abstain-if-not-singleton point on the evaluation half.
    pub set_size_curve: Vec<CurvePoint>,
    pub records: Vec<RecordSet>,
}

/// Split, fit, annotate and summarize. Returns the report and the evaluation
/// half with conformal fields filled.
pub fn run_split_conformal(
    records: &[EvalRecord],
    label_set: &[String],
    alpha: f64,
    seed: u64,
) -> Result<(ConformalReport, Vec<EvalRecord>)> {
    let (cal, eval) = split_calibration(records, seed)?;
    let model = fit(&cal, alpha)?;
    let stats = coverage_stats(&model, &eval, label_set)?;
    let cal_sets = annotate(&model, &cal, label_set)?;
    let eval_sets = annotate(&model, &eval, label_set)?;
    let mut rows: Vec<RecordSet> = cal_sets
        .iter()
        .map(|r| (r, "calibration"))
        .chain(eval_sets.iter().map(|r| (r, "evaluation")))
        .map(|(r, split)| RecordSet {
            example_id: r.example_id.clone(),
            split: split.into(),
            conformal_set: r.conformal_set.clone().unwrap_or_default(),
            covered: r.covered.unwrap_or(false),
        })
        .collect();
    let order: std::collections::HashMap<&str, usize> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.example_id.as_str(), i))
        .collect();
    rows.sort_by_key(|r| order.get(r.example_id.as_str()).copied().unwrap_or(usize::MAX));
    let report = ConformalReport {
        alpha,
        threshold: model.threshold,
        n_cal: model.n_calibration,
        n_eval: eval.len(),
        split_seed: seed,
        coverage: stats.coverage,
        mean_set_size: stats.mean_set_size,
        curve: coverage_accuracy_curve(&eval_sets, SelectivePolicy::ConfidenceThreshold)?,
        set_size_curve: coverage_accuracy_curve(&eval_sets, SelectivePolicy::AbstainIfNotSingleton)?,
        records: rows,
    };
    Ok((report, eval_sets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn yn() -> Vec<String> {
        vec!["Yes".into(), "No".into()]
    }

    fn rec(id: usize, gold: &str, p_yes: f64) -> EvalRecord {
        let pred = Prediction::from_probs(&yn(), &[p_yes, 1.0 - p_yes], "").unwrap();
        EvalRecord {
            example_id: format!("r{id}"),
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

    #[test]
    fn split_sizes_and_determinism() {
        let recs: Vec<_> = (0..100).map(|i| rec(i, "Yes", 0.7)).collect();
        let (c, e) = split_calibration(&recs, 1).unwrap();
        assert_eq!((c.len(), e.len()), (50, 50));
        let (c7, e7) = split_calibration(&recs[..7], 1).unwrap();
        assert_eq!((c7.len(), e7.len()), (4, 3));
        assert_eq!(split_calibration(&recs, 9).unwrap(), split_calibration(&recs, 9).unwrap());
        let mut ids: Vec<_> = c.iter().chain(&e).map(|r| r.example_id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 100);
        assert!(split_calibration(&recs[..1], 0).is_err());
    }

    #[test]
    fn order_statistic_threshold() {
        let scores: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        let m = fit_scores(&scores, 0.1).unwrap();
        assert_eq!(quantile_index(9, 0.1), 9);
        assert_abs_diff_eq!(m.threshold, 0.9);

        let m = fit_scores(&[0.2, 0.4, 0.1, 0.3], 0.1).unwrap();
        assert_eq!(quantile_index(4, 0.1), 5);
        assert!(m.threshold.is_infinite());

        let m = fit_scores(&[0.2, 0.4, 0.1, 0.3], 1.0 - 1e-9).unwrap();
        assert_eq!(m.threshold, 0.1);
        assert!(fit_scores(&[0.1], 0.0).is_err());
        assert!(fit_scores(&[], 0.1).is_err());
    }

    #[test]
    fn sets_follow_threshold_rule() {
        let p = Prediction::from_probs(&yn(), &[0.9, 0.1], "").unwrap();
        let model = |t| ConformalModel {
            alpha: 0.1,
            threshold: t,
            n_calibration: 1,
        };
        assert_eq!(predict_set(&model(f64::INFINITY), &p, &yn()).unwrap(), yn());
        assert_eq!(predict_set(&model(0.3), &p, &yn()).unwrap(), vec!["Yes".to_string()]);
        assert_eq!(predict_set(&model(0.95), &p, &yn()).unwrap(), yn());
        assert!(predict_set(&model(0.05), &p, &yn()).unwrap().is_empty());
    }

    #[test]
    fn infinite_threshold_covers_everything() {
        let m = ConformalModel {
            alpha: 0.1,
            threshold: f64::INFINITY,
            n_calibration: 4,
        };
        let recs: Vec<_> = (0..10).map(|i| rec(i, if i % 2 == 0 { "Yes" } else { "No" }, 0.8)).collect();
        let s = coverage_stats(&m, &recs, &yn()).unwrap();
        assert_eq!(s.coverage, 1.0);
        assert_eq!(s.mean_set_size, 2.0);
        assert!(coverage_stats(&m, &[], &yn()).is_err());
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"inf\""));
        assert_eq!(serde_json::from_str::<ConformalModel>(&json).unwrap(), m);
    }

    #[test]
    fn calibrated_binary_coverage() {
        // per-draw sd is ~0.013 around 901/1001, so about 93% of draws land in [0.88, 0.94]
        let covs: Vec<f64> = (1..=200u64)
            .map(|seed| {
                let recs = synthetic::calibrated_binary_records(2000, seed);
                let (cal, eval) = split_calibration(&recs, seed).unwrap();
                let m = fit(&cal, 0.1).unwrap();
                coverage_stats(&m, &eval, &yn()).unwrap().coverage
            })
            .collect();
        let mean = covs.iter().sum::<f64>() / covs.len() as f64;
        let in_range = covs.iter().filter(|c| (0.88..=0.94).contains(*c)).count();
        assert!((mean - 901.0 / 1001.0).abs() < 0.005, "mean coverage {mean}");
        assert!(in_range >= 180, "{in_range} of 200 draws in range");
    }

    #[test]
    fn threshold_curve_enumeration() {
        let recs = vec![rec(0, "Yes", 0.9), rec(1, "No", 0.8), rec(2, "Yes", 0.6)];
        let pts = coverage_accuracy_curve(&recs, SelectivePolicy::ConfidenceThreshold).unwrap();
        let got: Vec<(f64, f64)> = pts.iter().map(|p| (p.coverage, p.selective_accuracy)).collect();
        let want = [(1.0, 2.0 / 3.0), (2.0 / 3.0, 0.5), (1.0 / 3.0, 1.0)];
        assert_eq!(got.len(), 3);
        for (g, w) in got.iter().zip(want) {
            assert_abs_diff_eq!(g.0, w.0, epsilon = 1e-12);
            assert_abs_diff_eq!(g.1, w.1, epsilon = 1e-12);
        }
    }

    #[test]
    fn confident_correct_curve_is_one_point() {
        let recs = vec![rec(0, "Yes", 1.0), rec(1, "No", 0.0)];
        let pts = coverage_accuracy_curve(&recs, SelectivePolicy::ConfidenceThreshold).unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!((pts[0].coverage, pts[0].selective_accuracy), (1.0, 1.0));
    }

    #[test]
    fn singleton_policy() {
        let mut recs: Vec<_> = (0..4).map(|i| rec(i, "Yes", 0.9)).collect();
        for (i, r) in recs.iter_mut().enumerate() {
            r.conformal_set = Some(if i < 2 { vec!["Yes".into()] } else { yn() });
        }
        let pts = coverage_accuracy_curve(&recs, SelectivePolicy::AbstainIfNotSingleton).unwrap();
        assert_eq!((pts[0].coverage, pts[0].selective_accuracy), (0.5, 1.0));
        recs[0].conformal_set = None;
        assert!(coverage_accuracy_curve(&recs, SelectivePolicy::AbstainIfNotSingleton).is_err());
    }

    #[test]
    fn full_coverage_point_equals_accuracy() {
        let recs = synthetic::calibrated_binary_records(300, 2);
        let pts = coverage_accuracy_curve(&recs, SelectivePolicy::ConfidenceThreshold).unwrap();
        let first = pts.first().unwrap();
        assert_eq!(first.coverage, 1.0);
        assert_abs_diff_eq!(first.selective_accuracy, crate::metrics::accuracy(&recs).unwrap());
    }

    #[test]
    fn marginal_coverage_over_replicates() {
        let mut total = 0.0;
        for rep in 0..20u64 {
            let recs = synthetic::calibrated_binary_records(2000, 100 + rep);
            let (cal, eval) = split_calibration(&recs, rep).unwrap();
            let m = fit(&cal, 0.1).unwrap();
            total += coverage_stats(&m, &eval, &yn()).unwrap().coverage;
        }
        assert!(total / 20.0 >= 0.9 - 0.02);
    }

    proptest! {
        #[test]
        fn lower_alpha_is_never_tighter(seed in 0u64..500, n in 5usize..80) {
            let recs = synthetic::calibrated_binary_records(n * 2, seed);
            let (cal, eval) = split_calibration(&recs, seed).unwrap();
            let loose = fit(&cal, 0.05).unwrap();
            let tight = fit(&cal, 0.2).unwrap();
            prop_assert!(loose.threshold >= tight.threshold);
            for r in &eval {
                let a = predict_set(&loose, &r.base_prediction, &yn()).unwrap();
                let b = predict_set(&tight, &r.base_prediction, &yn()).unwrap();
                prop_assert!(b.iter().all(|l| a.contains(l)));
            }
            prop_assert!(
                coverage_stats(&loose, &eval, &yn()).unwrap().coverage
                    >= coverage_stats(&tight, &eval, &yn()).unwrap().coverage
            );
        }
    }
}
