mod common;

use common::{binary_auc, pairwise_c};
use dynpred::metrics::{brier_score, concordance_index, evaluate, td_auc, Metric};
use proptest::prelude::*;

/// Censored cohort on a coarse grid (so ties occur) with distinct scores.
fn cohort() -> impl Strategy<Value = (Vec<f64>, Vec<bool>, Vec<f64>)> {
    prop::collection::vec((1u32..20, prop::bool::weighted(0.6)), 4..40).prop_flat_map(|rows| {
        let n = rows.len();
        let times: Vec<f64> = rows.iter().map(|r| r.0 as f64 * 0.5).collect();
        let events: Vec<bool> = rows.iter().map(|r| r.1).collect();
        let scores: Vec<f64> = (0..n).map(|k| k as f64 / n as f64 - 0.3).collect();
        (Just(times), Just(events), Just(scores).prop_shuffle())
    })
}

fn has_auc_pairs(times: &[f64], events: &[bool], t: f64) -> bool {
    times.iter().zip(events).any(|(&ti, &e)| ti <= t && e) && times.iter().any(|&ti| ti > t)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn concordance_is_rank_based((times, events, risk) in cohort()) {
        if let Ok(c) = concordance_index(&times, &events, &risk) {
            prop_assert!((0.0..=1.0).contains(&c));
            prop_assert!((c - pairwise_c(&times, &events, &risk)).abs() < 1e-12);
            let exp: Vec<f64> = risk.iter().map(|r| r.exp()).collect();
            let affine: Vec<f64> = risk.iter().map(|r| 3.0 * r + 7.0).collect();
            let neg: Vec<f64> = risk.iter().map(|r| -r).collect();
            prop_assert_eq!(concordance_index(&times, &events, &exp).unwrap(), c);
            prop_assert_eq!(concordance_index(&times, &events, &affine).unwrap(), c);
            prop_assert!((concordance_index(&times, &events, &neg).unwrap() - (1.0 - c)).abs() < 1e-12);
        }
    }

    #[test]
    fn td_auc_is_rank_based((times, events, risk) in cohort(), k in 2u32..18) {
        let t = k as f64 * 0.5;
        prop_assume!(has_auc_pairs(&times, &events, t));
        let a = td_auc(&times, &events, &risk, t).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let exp: Vec<f64> = risk.iter().map(|r| r.exp()).collect();
        let affine: Vec<f64> = risk.iter().map(|r| 0.25 * r - 2.0).collect();
        prop_assert!((td_auc(&times, &events, &exp, t).unwrap() - a).abs() < 1e-12);
        prop_assert!((td_auc(&times, &events, &affine, t).unwrap() - a).abs() < 1e-12);
    }

    #[test]
    fn td_auc_without_censoring_is_binary_auc((times, _, risk) in cohort(), k in 2u32..18) {
        let t = k as f64 * 0.5;
        let events = vec![true; times.len()];
        prop_assume!(has_auc_pairs(&times, &events, t));
        let a = td_auc(&times, &events, &risk, t).unwrap();
        prop_assert!((a - binary_auc(&times, &risk, t)).abs() < 1e-12);
        let neg: Vec<f64> = risk.iter().map(|r| -r).collect();
        prop_assert!((td_auc(&times, &events, &neg, t).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn brier_is_nonnegative((times, events, risk) in cohort(), k in 2u32..18) {
        let t = k as f64 * 0.5;
        let surv: Vec<f64> = risk.iter().map(|r| 1.0 / (1.0 + r.exp())).collect();
        if let Ok(b) = brier_score(&times, &events, &surv, t) {
            prop_assert!(b >= 0.0 && b.is_finite());
        }
    }
}

#[test]
fn perfect_predictions_without_censoring() {
    let times = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let events = [true; 6];
    let t = 3.5;
    let surv: Vec<f64> = times.iter().map(|&x| if x > t { 1.0 } else { 0.0 }).collect();
    assert_eq!(brier_score(&times, &events, &surv, t).unwrap(), 0.0);
    assert_eq!(evaluate(Metric::TdAuc, &times, &events, &surv, t).unwrap(), 1.0);
    // two risk levels: pairs on the same side of t are tied
    assert_eq!(evaluate(Metric::CIndex, &times, &events, &surv, t).unwrap(), 0.8);
    let flipped: Vec<f64> = surv.iter().map(|s| 1.0 - s).collect();
    assert_eq!(brier_score(&times, &events, &flipped, t).unwrap(), 1.0);
    assert_eq!(evaluate(Metric::TdAuc, &times, &events, &flipped, t).unwrap(), 0.0);
}

#[test]
fn constant_scores_give_one_half() {
    let times = [1.0, 2.0, 2.0, 3.0, 5.0, 8.0];
    let events = [true, false, true, true, false, true];
    let risk = [0.4; 6];
    assert_eq!(concordance_index(&times, &events, &risk).unwrap(), 0.5);
    assert_eq!(td_auc(&times, &events, &risk, 3.0).unwrap(), 0.5);
}

#[test]
fn undefined_metrics_are_errors() {
    let times = [1.0, 2.0, 3.0];
    assert!(concordance_index(&times, &[false; 3], &[0.1, 0.2, 0.3]).is_err());
    assert!(td_auc(&times, &[true; 3], &[0.1, 0.2, 0.3], 5.0).is_err());
    assert!(td_auc(&times, &[true; 3], &[0.1, 0.2, 0.3], 0.5).is_err());
    assert!(concordance_index(&times, &[true; 3], &[0.1, 0.2]).is_err());
    assert!(brier_score(&times, &[true; 3], &[0.1, f64::NAN, 0.3], 2.0).is_err());
}
