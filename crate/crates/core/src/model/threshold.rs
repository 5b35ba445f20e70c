use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{prefix_scores, score};
use super::params::ModelParams;
use crate::error::{NestError, Result};
use crate::statespace::{Label, StateTrace};

/// Decision cutoff on the score; positive iff `score > tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub tau: f64,
    /// Identifier of the validation set the cutoff was chosen on.
    pub provenance: String,
}

/// `(tp, fp)` at cutoff `tau` against sorted positive and negative scores.
pub fn youden_counts(sorted_pos: &[f64], sorted_neg: &[f64], tau: f64) -> (usize, usize) {
    let above = |s: &[f64]| s.len() - s.partition_point(|x| *x <= tau);
    (above(sorted_pos), above(sorted_neg))
}

/// Youden-optimal cutoff over midpoints of adjacent sorted scores. `J` is
/// compared exactly as `tp * N - fp * P`; ties keep the smallest cutoff.
pub fn select_threshold(scores: &[f64], positive: &[bool], provenance: &str) -> Result<Threshold> {
    if scores.len() != positive.len() {
        return Err(NestError::Shape(format!("{} scores, {} labels", scores.len(), positive.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(NestError::InvalidDataset("non-finite validation score".into()));
    }
    let mut pos: Vec<f64> = scores.iter().zip(positive).filter(|(_, p)| **p).map(|(s, _)| *s).collect();
    let mut neg: Vec<f64> = scores.iter().zip(positive).filter(|(_, p)| !**p).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(NestError::InvalidDataset("threshold selection needs both classes in validation".into()));
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let mut all: Vec<f64> = scores.to_vec();
    all.sort_by(f64::total_cmp);
    let (p, n) = (pos.len() as i128, neg.len() as i128);
    let mut best: Option<(i128, f64)> = None;
    for w in all.windows(2) {
        let tau = w[0] + (w[1] - w[0]) / 2.0;
        let (tp, fp) = youden_counts(&pos, &neg, tau);
        let j = tp as i128 * n - fp as i128 * p;
        match best {
            Some((bj, bt)) if j < bj || (j == bj && tau >= bt) => {}
            _ => best = Some((j, tau)),
        }
    }
    let (_, tau) = best.expect("at least two scores");
    Ok(Threshold {
        tau,
        provenance: provenance.to_string(),
    })
}

/// Mean of sensitivity and specificity.
pub fn balanced_accuracy(scores: &[f64], positive: &[bool], tau: f64) -> f64 {
    let (mut tp, mut p, mut tn, mut n) = (0usize, 0usize, 0usize, 0usize);
    for (s, y) in scores.iter().zip(positive) {
        if *y {
            p += 1;
            tp += (*s > tau) as usize;
        } else {
            n += 1;
            tn += (*s <= tau) as usize;
        }
    }
    let rate = |k: usize, m: usize| if m == 0 { 0.0 } else { k as f64 / m as f64 };
    (rate(tp, p) + rate(tn, n)) / 2.0
}

fn decide(score: f64, tau: f64) -> Label {
    if score > tau {
        Label::Ransomware
    } else {
        Label::Benign
    }
}

pub fn classify(trace: &StateTrace, params: &ModelParams, tau: f64) -> Result<(Label, f64)> {
    let s = score(trace, params)?;
    Ok((decide(s, tau), s))
}

pub fn classify_batch(traces: &[StateTrace], params: &ModelParams, tau: f64) -> Result<Vec<(Label, f64)>> {
    traces.par_iter().map(|t| classify(t, params, tau)).collect()
}

/// End window of the first run of `persistence` consecutive positive prefix
/// decisions, evaluating prefixes every `stride` windows.
pub fn classify_prefix(trace: &StateTrace, params: &ModelParams, tau: f64, stride: usize, persistence: usize) -> Result<Option<usize>> {
    if persistence == 0 {
        return Err(NestError::InvalidConfig("persistence must be >= 1".into()));
    }
    let mut run = 0;
    for (end, s) in prefix_scores(trace, params, stride)? {
        if s > tau {
            run += 1;
            if run == persistence {
                return Ok(Some(end));
            }
        } else {
            run = 0;
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use crate::statespace::{ActionCode, EncryptedState};

    #[test]
    fn separable_scores_pick_middle_gap() {
        let t = select_threshold(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true], "val").unwrap();
        assert_eq!(t.tau, 0.5);
        assert_eq!(t.provenance, "val");
    }

    #[test]
    fn identical_scores_return_smallest_candidate() {
        let t = select_threshold(&[0.4; 6], &[true, false, true, false, true, false], "v").unwrap();
        assert_eq!(t.tau, 0.4);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(select_threshold(&[0.1, 0.2], &[true, true], "v").is_err());
    }

    #[test]
    fn boundary_score_is_benign() {
        assert_eq!(decide(0.5, 0.5), Label::Benign);
        assert_eq!(decide(0.9, 0.5), Label::Ransomware);
    }

    fn constant_trace(n: usize, label: Label) -> StateTrace {
        let states: Vec<EncryptedState> = (0..n).map(|t| EncryptedState(vec![(t % 3) as f64 * 0.1; 4])).collect();
        let fam = if label == Label::Benign { "benign" } else { "x" };
        StateTrace::from_states("t", label, fam, 0.025, &states, vec![ActionCode(0); n - 1]).unwrap()
    }

    #[test]
    fn prefix_detection_from_first_evaluation() {
        let arch = Architecture::new(4, 5, 1, 4).unwrap();
        let mut p = ModelParams::zeros(arch);
        let (_, hb) = arch.head_offsets();
        p.values[hb] = 3.0;
        let tr = constant_trace(80, Label::Ransomware);
        assert_eq!(classify_prefix(&tr, &p, 0.5, 8, 3).unwrap(), Some(24));
        p.values[hb] = -3.0;
        assert_eq!(classify_prefix(&tr, &p, 0.5, 8, 3).unwrap(), None);
    }

    #[test]
    fn batch_classify_is_pointwise() {
        let arch = Architecture::new(4, 5, 1, 4).unwrap();
        let mut p = ModelParams::zeros(arch);
        let (hw, _) = arch.head_offsets();
        p.values[hw] = 2.0;
        let traces = vec![constant_trace(10, Label::Benign), constant_trace(20, Label::Ransomware)];
        let batch = classify_batch(&traces, &p, 0.52).unwrap();
        for (t, b) in traces.iter().zip(&batch) {
            assert_eq!(classify(t, &p, 0.52).unwrap(), *b);
        }
    }
    mod props {
        use super::*;
        use proptest::prelude::*;

        /// Exhaustive Youden search with direct counting.
        fn brute_force(scores: &[f64], positive: &[bool]) -> f64 {
            let p = positive.iter().filter(|y| **y).count() as i128;
            let n = positive.len() as i128 - p;
            let mut sorted = scores.to_vec();
            sorted.sort_by(f64::total_cmp);
            let mut best = (i128::MIN, f64::INFINITY);
            for i in 0..sorted.len() - 1 {
                let tau = sorted[i] + (sorted[i + 1] - sorted[i]) / 2.0;
                let mut tp = 0i128;
                let mut fp = 0i128;
                for (s, y) in scores.iter().zip(positive) {
                    if *s > tau {
                        if *y {
                            tp += 1;
                        } else {
                            fp += 1;
                        }
                    }
                }
                let j = tp * n - fp * p;
                if j > best.0 || (j == best.0 && tau < best.1) {
                    best = (j, tau);
                }
            }
            best.1
        }

        fn labelled_scores() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
            (2usize..40).prop_flat_map(|n| {
                (
                    prop::collection::vec(prop_oneof![(0u32..20).prop_map(|k| k as f64 / 20.0), 0.0f64..1.0], n),
                    prop::collection::vec(any::<bool>(), n - 2),
                )
                    .prop_map(|(s, mut y)| {
                        y.push(true);
                        y.push(false);
                        (s, y)
                    })
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]

            #[test]
            fn select_threshold_is_the_brute_force_argmax((scores, positive) in labelled_scores()) {
                let t = select_threshold(&scores, &positive, "v").unwrap();
                prop_assert_eq!(t.tau, brute_force(&scores, &positive));
            }

            #[test]
            fn positive_count_is_monotone_in_tau(scores in prop::collection::vec(0.0f64..1.0, 1..50), a in 0.0f64..1.0, b in 0.0f64..1.0) {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                let count = |tau: f64| scores.iter().filter(|s| decide(**s, tau) == Label::Ransomware).count();
                prop_assert!(count(lo) >= count(hi));
            }
        }
    }
}
