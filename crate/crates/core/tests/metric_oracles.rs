//! Metric functions against naive brute-force references.

use proptest::prelude::*;
use revbio_core::metrics::verification_accuracy;
use revbio_core::{d_prime, fmr_threshold, MetricsError, ScoreSet};

fn naive_d_prime(g: &[f64], i: &[f64]) -> f64 {
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let var = |x: &[f64]| {
        let m = mean(x);
        x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
    };
    (mean(g) - mean(i)).abs() / ((var(g) + var(i)) / 2.0).sqrt()
}

/// Tries every impostor score as a threshold and keeps the smallest one
/// letting at most floor(M * fmr) scores through.
fn naive_fmr_threshold(imp: &[f64], fmr: f64) -> f64 {
    let allowed = (imp.len() as f64 * fmr).floor() as usize;
    imp.iter()
        .copied()
        .filter(|&t| imp.iter().filter(|&&s| s > t).count() <= allowed)
        .fold(f64::INFINITY, f64::min)
}

/// Per-fold accuracy, counting every candidate threshold's training accuracy directly.
fn naive_accuracy(pairs: &[(f64, bool)], folds: usize) -> Vec<f64> {
    (0..folds)
        .map(|fold| {
            let train: Vec<(f64, bool)> = pairs
                .iter()
                .enumerate()
                .filter(|(i, _)| i % folds != fold)
                .map(|(_, p)| *p)
                .collect();
            let correct = |t: f64| train.iter().filter(|&&(s, g)| (s > t) == g).count();
            let mut best = (correct(f64::NEG_INFINITY), f64::NEG_INFINITY);
            for &(t, _) in &train {
                let c = correct(t);
                if c > best.0 || (c == best.0 && t < best.1) {
                    best = (c, t);
                }
            }
            let test: Vec<&(f64, bool)> = pairs
                .iter()
                .enumerate()
                .filter(|(i, _)| i % folds == fold)
                .map(|(_, p)| p)
                .collect();
            100.0 * test.iter().filter(|&&&(s, g)| (s > best.1) == g).count() as f64
                / test.len() as f64
        })
        .collect()
}

fn scores(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    // Coarse grids produce ties; fine values exercise the general case.
    prop_oneof![
        prop::collection::vec(-1.0f64..1.0, n.clone()),
        prop::collection::vec((-20i32..=20).prop_map(|k| k as f64 / 20.0), n),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn d_prime_matches_naive(g in scores(2..200), i in scores(2..200)) {
        if let Ok(d) = d_prime(&ScoreSet::new(g.clone(), i.clone())) {
            prop_assert!((d.value - naive_d_prime(&g, &i)).abs() <= 1e-12 * d.value.max(1.0));
        }
    }

    #[test]
    fn fmr_threshold_matches_naive(imp in scores(1..400), fmr in 1e-4f64..0.999) {
        let spec = fmr_threshold(&imp, fmr).unwrap();
        prop_assert_eq!(spec.threshold, naive_fmr_threshold(&imp, fmr));
        let above = imp.iter().filter(|&&s| s > spec.threshold).count();
        prop_assert_eq!(spec.empirical_fmr, above as f64 / imp.len() as f64);
        prop_assert!(spec.empirical_fmr <= fmr);
    }

    #[test]
    fn accuracy_matches_naive(
        labelled in prop::collection::vec(((-20i32..=20).prop_map(|k| k as f64 / 20.0), any::<bool>()), 24..160),
        folds in 2usize..8,
    ) {
        let mut pairs = labelled;
        // Guarantee both classes in every training split.
        for k in 0..folds {
            pairs[k].1 = true;
            pairs[folds + k].1 = false;
        }
        let acc = verification_accuracy(&pairs, folds).unwrap();
        let want = naive_accuracy(&pairs, folds);
        for (a, b) in acc.per_fold.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        let mean = want.iter().sum::<f64>() / folds as f64;
        prop_assert!((acc.mean_accuracy - mean).abs() <= 1e-12);
    }
}

#[test]
fn single_class_training_split_is_rejected() {
    // Round-robin puts both genuine scores in fold 0 and both impostors in fold 1.
    let block = [(0.6, true), (0.5, false), (0.4, true), (0.3, false)];
    let pairs: Vec<(f64, bool)> = block.iter().copied().cycle().take(40).collect();
    assert!(matches!(
        verification_accuracy(&pairs, 2),
        Err(MetricsError::SingleClassFold(0))
    ));
}

#[test]
fn interleaved_two_fold_example() {
    let block = [(0.6, true), (0.4, true), (0.5, false), (0.3, false)];
    let pairs: Vec<(f64, bool)> = block.iter().copied().cycle().take(40).collect();
    let acc = verification_accuracy(&pairs, 2).unwrap();
    // Each fold trains on {0.4 genuine, 0.3 impostor} or {0.6 genuine, 0.5 impostor}.
    assert_eq!(acc.thresholds, vec![0.3, 0.5]);
    assert_eq!(acc.per_fold, vec![50.0, 50.0]);
    assert_eq!(acc.per_fold, naive_accuracy(&pairs, 2));
}

#[test]
fn inverted_labels_never_beat_chance_on_separable_data() {
    let pairs: Vec<(f64, bool)> = (0..100)
        .map(|k| {
            if k % 2 == 0 {
                (0.1, true)
            } else {
                (0.9, false)
            }
        })
        .collect();
    let acc = verification_accuracy(&pairs, 10).unwrap();
    assert!(acc.mean_accuracy <= 50.0, "{}", acc.mean_accuracy);
    assert_eq!(acc.per_fold, naive_accuracy(&pairs, 10));
}
