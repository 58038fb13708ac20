//! Score-distribution statistics: d-prime, FMR threshold calibration,
//! k-fold verification accuracy and histograms.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pooled variance at or below this is treated as zero.
pub const DEGENERATE_VARIANCE: f64 = 1e-24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("pooled variance is zero; d-prime is undefined")]
    DegenerateVariance,
    #[error("impostor score set is empty")]
    EmptyImpostorSet,
    #[error("FMR target must lie strictly between 0 and 1, got {0}")]
    InvalidTarget(f64),
    #[error("need at least {needed} pairs for {folds} folds, got {got}")]
    TooFewPairs {
        needed: usize,
        got: usize,
        folds: usize,
    },
    #[error("fold count must be at least 2, got {0}")]
    InvalidFolds(usize),
    #[error("training data for fold {0} lacks one of the two classes")]
    SingleClassFold(usize),
    #[error("histogram range is empty or non-finite: [{lo}, {hi}]")]
    InvalidRange { lo: f64, hi: f64 },
    #[error("histogram needs at least one bin")]
    NoBins,
    #[error("score at index {0} is not finite")]
    NonFinite(usize),
}

fn check_finite(scores: &[f64]) -> Result<(), MetricsError> {
    match scores.iter().position(|s| !s.is_finite()) {
        Some(i) => Err(MetricsError::NonFinite(i)),
        None => Ok(()),
    }
}

/// Genuine and impostor similarity samples.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> Self {
        Self { genuine, impostor }
    }

    pub fn impostor_count(&self) -> usize {
        self.impostor.len()
    }

    pub fn max_genuine(&self) -> Option<f64> {
        self.genuine.iter().copied().reduce(f64::max)
    }

    pub fn max_impostor(&self) -> Option<f64> {
        self.impostor.iter().copied().reduce(f64::max)
    }

    pub fn d_prime(&self) -> Result<DPrimeValue, MetricsError> {
        d_prime(self)
    }
}

/// Running mean and sum of squared deviations (Welford).
#[derive(Debug, Clone, Copy, Default)]
pub struct Moments {
    pub count: usize,
    pub mean: f64,
    m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        let mut m = Self::default();
        xs.iter().for_each(|&x| m.push(x));
        m
    }

    /// Unbiased (n - 1) sample variance.
    pub fn sample_variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn sample_std(&self) -> f64 {
        self.sample_variance().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DPrimeValue {
    pub value: f64,
    pub genuine_mean: f64,
    pub impostor_mean: f64,
    pub genuine_std: f64,
    pub impostor_std: f64,
}

/// `|mu_g - mu_i| / sqrt((var_g + var_i) / 2)` with unbiased sample variances.
pub fn d_prime(scores: &ScoreSet) -> Result<DPrimeValue, MetricsError> {
    for set in [&scores.genuine, &scores.impostor] {
        if set.len() < 2 {
            return Err(MetricsError::InsufficientSamples {
                needed: 2,
                got: set.len(),
            });
        }
        check_finite(set)?;
    }
    let g = Moments::from_slice(&scores.genuine);
    let i = Moments::from_slice(&scores.impostor);
    let pooled = (g.sample_variance() + i.sample_variance()) / 2.0;
    if pooled <= DEGENERATE_VARIANCE {
        return Err(MetricsError::DegenerateVariance);
    }
    Ok(DPrimeValue {
        value: (g.mean - i.mean).abs() / pooled.sqrt(),
        genuine_mean: g.mean,
        impostor_mean: i.mean,
        genuine_std: g.sample_std(),
        impostor_std: i.sample_std(),
    })
}

/// A decision threshold calibrated on impostor scores.
///
/// The accept rule is strict: a comparison matches iff `score > threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    pub fmr_target: f64,
    pub threshold: f64,
    pub impostor_count: usize,
    pub empirical_fmr: f64,
}

impl ThresholdSpec {
    pub fn accepts(&self, score: f64) -> bool {
        score > self.threshold
    }

    /// Whether the calibration set had at least `10 / fmr_target` impostors.
    pub fn is_well_sampled(&self) -> bool {
        self.impostor_count as f64 >= 10.0 / self.fmr_target
    }
}

/// Number of calibration impostors allowed above the threshold.
fn allowed_exceedances(count: usize, fmr_target: f64) -> usize {
    (count as f64 * fmr_target).floor() as usize
}

/// Conservative empirical order-statistic threshold.
///
/// With `s_1 <= ... <= s_M` and `k = floor(M * fmr_target)`, the threshold is
/// `s_(M-k)`. Under the strict accept rule at most `k` calibration impostors
/// pass, so the empirical FMR never exceeds the target.
pub fn fmr_threshold(impostor: &[f64], fmr_target: f64) -> Result<ThresholdSpec, MetricsError> {
    if impostor.is_empty() {
        return Err(MetricsError::EmptyImpostorSet);
    }
    if !(fmr_target > 0.0 && fmr_target < 1.0) {
        return Err(MetricsError::InvalidTarget(fmr_target));
    }
    check_finite(impostor)?;
    let m = impostor.len();
    let k = allowed_exceedances(m, fmr_target);
    let mut work = impostor.to_vec();
    let (_, &mut threshold, _) = work.select_nth_unstable_by(m - k - 1, f64::total_cmp);
    let above = impostor.iter().filter(|&&s| s > threshold).count();
    let spec = ThresholdSpec {
        fmr_target,
        threshold,
        impostor_count: m,
        empirical_fmr: above as f64 / m as f64,
    };
    if !spec.is_well_sampled() {
        log::warn!(
            "FMR threshold at target {fmr_target} calibrated on only {m} impostor scores; \
             at least {:.0} recommended",
            10.0 / fmr_target
        );
    }
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationAccuracy {
    /// Mean of the per-fold accuracies, in percent.
    pub mean_accuracy: f64,
    pub per_fold: Vec<f64>,
    /// Threshold selected on the training folds for each held-out fold.
    pub thresholds: Vec<f64>,
}

/// Leave-one-fold-out 1:1 verification accuracy.
///
/// Pairs are dealt round-robin into `folds` folds by input position. For each
/// fold the threshold maximizing accuracy on the remaining folds is chosen
/// (lowest threshold on ties; candidates are every training score plus
/// negative infinity), then applied to the held-out fold with the strict
/// `score > threshold` rule.
pub fn verification_accuracy(
    pairs: &[(f64, bool)],
    folds: usize,
) -> Result<VerificationAccuracy, MetricsError> {
    if folds < 2 {
        return Err(MetricsError::InvalidFolds(folds));
    }
    if pairs.len() < folds * 2 {
        return Err(MetricsError::TooFewPairs {
            needed: folds * 2,
            got: pairs.len(),
            folds,
        });
    }
    if let Some(i) = pairs.iter().position(|(s, _)| !s.is_finite()) {
        return Err(MetricsError::NonFinite(i));
    }

    // Sorting once lets every fold's training sweep walk the same order.
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| pairs[a].0.total_cmp(&pairs[b].0));

    let mut per_fold = Vec::with_capacity(folds);
    let mut thresholds = Vec::with_capacity(folds);
    for fold in 0..folds {
        let threshold = best_training_threshold(pairs, &order, folds, fold)?;
        let (mut correct, mut total) = (0usize, 0usize);
        for (_, &(score, genuine)) in pairs.iter().enumerate().filter(|(i, _)| i % folds == fold) {
            total += 1;
            if (score > threshold) == genuine {
                correct += 1;
            }
        }
        per_fold.push(100.0 * correct as f64 / total as f64);
        thresholds.push(threshold);
    }
    let mean_accuracy = per_fold.iter().sum::<f64>() / folds as f64;
    Ok(VerificationAccuracy {
        mean_accuracy,
        per_fold,
        thresholds,
    })
}

fn best_training_threshold(
    pairs: &[(f64, bool)],
    order: &[usize],
    folds: usize,
    held_out: usize,
) -> Result<f64, MetricsError> {
    let training = || order.iter().copied().filter(|i| i % folds != held_out);
    let genuine = training().filter(|&i| pairs[i].1).count();
    let impostor = training().filter(|&i| !pairs[i].1).count();
    if genuine == 0 || impostor == 0 {
        return Err(MetricsError::SingleClassFold(held_out));
    }

    // Threshold -inf accepts everything: all genuine correct.
    let mut correct = genuine as i64;
    let mut best = (correct, f64::NEG_INFINITY);
    let mut iter = training().peekable();
    while let Some(i) = iter.next() {
        let value = pairs[i].0;
        correct += if pairs[i].1 { -1 } else { 1 };
        // Consume the whole run of equal scores before evaluating.
        while let Some(&j) = iter.peek() {
            if pairs[j].0 != value {
                break;
            }
            correct += if pairs[j].1 { -1 } else { 1 };
            iter.next();
        }
        if correct > best.0 {
            best = (correct, value);
        }
    }
    Ok(best.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_center: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub bins: Vec<HistogramBin>,
    pub underflow: u64,
    pub overflow: u64,
}

impl Histogram {
    pub fn in_range_count(&self) -> u64 {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// CSV with columns `bin_center,count`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["bin_center", "count"])
            .expect("in-memory csv");
        for b in &self.bins {
            w.serialize((b.bin_center, b.count)).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }
}

/// Equal-width histogram over `[lo, hi]`; the top edge belongs to the last bin.
pub fn score_histogram(
    scores: &[f64],
    bins: usize,
    lo: f64,
    hi: f64,
) -> Result<Histogram, MetricsError> {
    if bins == 0 {
        return Err(MetricsError::NoBins);
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(MetricsError::InvalidRange { lo, hi });
    }
    check_finite(scores)?;
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    let (mut underflow, mut overflow) = (0, 0);
    for &s in scores {
        if s < lo {
            underflow += 1;
        } else if s > hi {
            overflow += 1;
        } else {
            let idx = (((s - lo) / (hi - lo)) * bins as f64) as usize;
            counts[idx.min(bins - 1)] += 1;
        }
    }
    let bins = counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            bin_center: lo + width * (i as f64 + 0.5),
            count,
        })
        .collect();
    Ok(Histogram {
        lo,
        hi,
        bins,
        underflow,
        overflow,
    })
}

/// Mean and unbiased standard deviation of a small sample (0 when n < 2).
pub fn mean_and_std(xs: &[f64]) -> (f64, f64) {
    let m = Moments::from_slice(xs);
    (m.mean, m.sample_std())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn d_prime_hand_computed() {
        let s = ScoreSet::new(vec![0.8, 0.85, 0.9], vec![0.1, 0.15, 0.2]);
        let d = d_prime(&s).unwrap();
        assert!((d.value - 14.0).abs() < 1e-12, "{}", d.value);
        assert!((d.genuine_mean - 0.85).abs() < 1e-15);
        assert!((d.genuine_std - 0.05).abs() < 1e-15);
    }

    #[test]
    fn d_prime_equal_sets_is_zero() {
        let v = vec![0.1, 0.4, 0.35, 0.9];
        assert_eq!(d_prime(&ScoreSet::new(v.clone(), v)).unwrap().value, 0.0);
    }

    #[test]
    fn d_prime_errors() {
        let s = ScoreSet::new(vec![1.0, 1.0], vec![1.0, 1.0]);
        assert_eq!(d_prime(&s), Err(MetricsError::DegenerateVariance));
        let s = ScoreSet::new(vec![1.0], vec![0.0, 0.5]);
        assert!(matches!(
            d_prime(&s),
            Err(MetricsError::InsufficientSamples { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn fmr_threshold_ten_values() {
        let imp: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let t = fmr_threshold(&imp, 0.1).unwrap();
        assert_eq!(t.threshold, 0.9);
        assert_eq!(t.empirical_fmr, 0.1);
        assert_eq!(t.impostor_count, 10);
    }

    #[test]
    fn fmr_threshold_tiny_target_takes_max() {
        let imp = vec![0.3, -0.2, 0.7, 0.1];
        let t = fmr_threshold(&imp, 1e-6).unwrap();
        assert_eq!(t.threshold, 0.7);
        assert_eq!(t.empirical_fmr, 0.0);
        assert!(!t.is_well_sampled());
    }

    #[test]
    fn fmr_threshold_errors() {
        assert_eq!(fmr_threshold(&[], 0.1), Err(MetricsError::EmptyImpostorSet));
        assert_eq!(
            fmr_threshold(&[0.1], 0.0),
            Err(MetricsError::InvalidTarget(0.0))
        );
        assert_eq!(
            fmr_threshold(&[0.1], 1.0),
            Err(MetricsError::InvalidTarget(1.0))
        );
    }

    #[test]
    fn fmr_threshold_with_ties_stays_conservative() {
        let imp = vec![0.5, 0.5, 0.5, 0.5, 0.1];
        let t = fmr_threshold(&imp, 0.4).unwrap();
        // k = 2 but the top three scores tie: nobody is strictly above.
        assert_eq!(t.threshold, 0.5);
        assert_eq!(t.empirical_fmr, 0.0);
    }

    #[test]
    fn accuracy_separable() {
        let mut pairs = vec![(0.9, true); 50];
        pairs.extend(vec![(0.1, false); 50]);
        let acc = verification_accuracy(&pairs, 10).unwrap();
        assert_eq!(acc.mean_accuracy, 100.0);
        assert!(acc.per_fold.iter().all(|&a| a == 100.0));
    }

    #[test]
    fn accuracy_inverted_labels_is_at_most_chance() {
        let mut pairs = vec![(0.1, true); 50];
        pairs.extend(vec![(0.9, false); 50]);
        let acc = verification_accuracy(&pairs, 10).unwrap();
        assert!(acc.mean_accuracy <= 50.0, "{}", acc.mean_accuracy);
    }

    #[test]
    fn accuracy_interleaved_matches_sweep() {
        // Value frozen from the exhaustive threshold sweep in the reference
        // implementation under tests/metrics_oracle.rs.
        let pairs: Vec<(f64, bool)> = (0..10)
            .flat_map(|_| [(0.6, true), (0.4, true), (0.5, false), (0.3, false)])
            .collect();
        let acc = verification_accuracy(&pairs, 2).unwrap();
        assert_eq!(acc.thresholds, vec![0.3, 0.5]);
        assert_eq!(acc.per_fold, vec![50.0, 50.0]);
        assert_eq!(acc.mean_accuracy, 50.0);
    }

    #[test]
    fn accuracy_errors() {
        let pairs = vec![(0.5, true), (0.2, false), (0.7, true)];
        assert!(matches!(
            verification_accuracy(&pairs, 2),
            Err(MetricsError::TooFewPairs { .. })
        ));
        assert_eq!(
            verification_accuracy(&pairs, 1),
            Err(MetricsError::InvalidFolds(1))
        );
        let single = vec![(0.5, true); 10];
        assert_eq!(
            verification_accuracy(&single, 2),
            Err(MetricsError::SingleClassFold(0))
        );
    }

    #[test]
    fn histogram_examples() {
        let h = score_histogram(&[0.5], 1, 0.0, 1.0).unwrap();
        assert_eq!(
            h.bins,
            vec![HistogramBin {
                bin_center: 0.5,
                count: 1
            }]
        );

        let h = score_histogram(&[], 4, 0.0, 1.0).unwrap();
        assert!(h.bins.iter().all(|b| b.count == 0));

        let grid: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        let h = score_histogram(&grid, 10, 0.0, 1.0).unwrap();
        assert!(h.bins.iter().all(|b| b.count == 10));

        let h = score_histogram(&[-2.0, 0.0, 1.0, 3.0], 2, 0.0, 1.0).unwrap();
        assert_eq!((h.underflow, h.overflow, h.in_range_count()), (1, 1, 2));
        assert_eq!(h.bins[1].count, 1);

        assert!(matches!(
            score_histogram(&[0.1], 3, 1.0, 1.0),
            Err(MetricsError::InvalidRange { .. })
        ));
    }

    #[test]
    fn histogram_csv() {
        let h = score_histogram(&[0.1, 0.2, 0.9], 2, 0.0, 1.0).unwrap();
        assert_eq!(h.to_csv(), "bin_center,count\n0.25,2\n0.75,1\n");
    }

    proptest! {
        #[test]
        fn d_prime_symmetric_and_affine_invariant(
            g in prop::collection::vec(-1.0f64..1.0, 2..40),
            i in prop::collection::vec(-1.0f64..1.0, 2..40),
            shift in -5.0f64..5.0,
            scale in 0.1f64..10.0,
        ) {
            let base = ScoreSet::new(g.clone(), i.clone());
            let Ok(d) = d_prime(&base) else { return Ok(()) };
            let swapped = d_prime(&ScoreSet::new(i.clone(), g.clone())).unwrap();
            prop_assert!((d.value - swapped.value).abs() <= 1e-9 * d.value.max(1.0));
            let map = |v: &[f64]| v.iter().map(|x| x * scale + shift).collect::<Vec<_>>();
            let moved = d_prime(&ScoreSet::new(map(&g), map(&i))).unwrap();
            prop_assert!((d.value - moved.value).abs() <= 1e-7 * d.value.max(1.0));
        }

        #[test]
        fn fmr_threshold_monotone_and_consistent(
            imp in prop::collection::vec(-1.0f64..1.0, 1..300),
            a in 0.001f64..0.999,
            b in 0.001f64..0.999,
        ) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let t_lo = fmr_threshold(&imp, lo).unwrap();
            let t_hi = fmr_threshold(&imp, hi).unwrap();
            prop_assert!(t_lo.threshold >= t_hi.threshold);
            for t in [t_lo, t_hi] {
                prop_assert!(t.empirical_fmr <= t.fmr_target);
                let accepted = imp.iter().filter(|&&s| t.accepts(s)).count();
                prop_assert_eq!(accepted as f64 / imp.len() as f64, t.empirical_fmr);
            }
        }
    }
}
