mod common;

use common::{oracle_eer, oracle_mindcf};
use neural_scoring::evalkit::{
    compute_eer, compute_mindcf, cosine_score, det_curve, det_metrics, summarize, ConditionScores, DcfParams, System,
};
use neural_scoring::synthcorpus::{Condition, TrialLabel, TrialListEntry};
use proptest::prelude::*;

/// Score lists on a coarse grid so that ties are common.
fn scores() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    let grid = || prop::collection::vec((-20i32..20).prop_map(|k| k as f64 / 4.0), 1..40);
    (grid(), grid())
}

fn params() -> impl Strategy<Value = DcfParams> {
    (0.001f64..0.5, 0.5f64..10.0, 0.5f64..10.0).prop_map(|(p_tar, c_miss, c_fa)| DcfParams { p_tar, c_miss, c_fa })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn metrics_equal_brute_force((tar, non) in scores(), dcf in params()) {
        let (eer, _) = compute_eer(&tar, &non).unwrap();
        prop_assert_eq!(eer, oracle_eer(&tar, &non));
        let min_dcf = compute_mindcf(&tar, &non, dcf).unwrap();
        prop_assert_eq!(min_dcf, oracle_mindcf(&tar, &non, dcf.p_tar, dcf.c_miss, dcf.c_fa));
        prop_assert!((0.0..=1.0).contains(&min_dcf));
        prop_assert!((0.0..=1.0).contains(&eer));
    }

    #[test]
    fn metrics_ignore_monotone_transforms((tar, non) in scores(), scale in 1u32..8, shift in -5i32..5) {
        let dcf = DcfParams::default();
        let base = det_metrics(&tar, &non, dcf).unwrap();
        let affine = |s: &f64| s * scale as f64 + shift as f64;
        let logistic = |s: &f64| 1.0 / (1.0 + (-s).exp());
        for f in [&affine as &dyn Fn(&f64) -> f64, &logistic] {
            let (t2, n2): (Vec<f64>, Vec<f64>) = (tar.iter().map(f).collect(), non.iter().map(f).collect());
            let m = det_metrics(&t2, &n2, dcf).unwrap();
            prop_assert_eq!(m.eer, base.eer);
            prop_assert_eq!(m.min_dcf, base.min_dcf);
        }
    }

    #[test]
    fn det_curve_is_monotone((tar, non) in scores()) {
        let curve = det_curve(&tar, &non).unwrap();
        prop_assert_eq!((curve[0].p_miss, curve[0].p_fa), (0.0, 1.0));
        let last = curve.last().unwrap();
        prop_assert_eq!((last.p_miss, last.p_fa), (1.0, 0.0));
        for w in curve.windows(2) {
            prop_assert!(w[0].threshold < w[1].threshold);
            prop_assert!(w[0].p_miss <= w[1].p_miss);
            prop_assert!(w[0].p_fa >= w[1].p_fa);
        }
    }

    #[test]
    fn a_system_or_its_negation_is_at_most_chance((tar, non) in scores()) {
        let neg = |v: &[f64]| v.iter().map(|s| -s).collect::<Vec<_>>();
        let a = compute_eer(&tar, &non).unwrap().0;
        let b = compute_eer(&neg(&tar), &neg(&non)).unwrap().0;
        prop_assert!(a.min(b) <= 0.5 + 1e-12);
    }
}

#[test]
fn separable_and_inverted_scores_hit_the_extremes() {
    let (tar, non) = (vec![3.0, 4.0], vec![1.0, 2.0]);
    assert_eq!(compute_eer(&tar, &non).unwrap().0, 0.0);
    assert_eq!(compute_mindcf(&tar, &non, DcfParams::default()).unwrap(), 0.0);
    assert_eq!(compute_eer(&non, &tar).unwrap().0, 1.0);
    assert_eq!(compute_eer(&[1.0], &[1.0]).unwrap().0, 0.5);
}

#[test]
fn empty_or_nan_scores_are_rejected() {
    assert!(compute_eer(&[], &[1.0]).is_err());
    assert!(compute_eer(&[1.0], &[f64::NAN]).is_err());
}

#[test]
fn summary_pools_conditions_into_an_overall_row() {
    let trial = |k: usize, target: bool| TrialListEntry {
        enroll_utterance_id: format!("e{k}"),
        test_utterance_id: format!("t{k}"),
        label: if target {
            TrialLabel::Target
        } else {
            TrialLabel::Nontarget
        },
    };
    let sets = vec![
        ConditionScores {
            condition: Condition::Clean,
            trials: vec![trial(0, true), trial(1, false), trial(2, false)],
            scores: vec![0.9, 0.1, 0.95],
        },
        ConditionScores {
            condition: Condition::Mixing,
            trials: vec![trial(3, true), trial(4, false)],
            scores: vec![0.4, 0.5],
        },
    ];
    let rows = summarize(System::Ns, &sets, DcfParams::default()).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2].condition, "overall");
    assert_eq!((rows[2].n_target, rows[2].n_nontarget), (2, 3));
    assert_eq!(rows[2].eer, oracle_eer(&[0.9, 0.4], &[0.1, 0.95, 0.5]));
    assert_eq!(rows[1].eer, 1.0);
}

#[test]
fn interleaved_scores_match_the_exhaustive_sweep() {
    let (tar, non) = ([0.8, 0.6, 0.4], [0.7, 0.5, 0.3]);
    assert_eq!(compute_eer(&tar, &non).unwrap().0, oracle_eer(&tar, &non));
    // Rates cross exactly at threshold 0.6: one miss and one false alarm in three.
    assert!((compute_eer(&tar, &non).unwrap().0 - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(compute_eer(&[0.9, 0.8], &[0.1, 0.2]).unwrap().0, 0.0);
    let same = [0.3, 0.5, 0.7];
    assert_eq!(compute_eer(&same, &same).unwrap().0, 0.5);
}

#[test]
fn cosine_follows_its_definition() {
    assert!((cosine_score(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
    assert!((cosine_score(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() + 1.0).abs() < 1e-15);
    assert!(cosine_score(&[0.0, 0.0], &[1.0, 0.0]).is_err());
}
