//! Metrics (MAE, support-weighted 4-class accuracy, class-wise F1) and
//! the selection-aware paired bootstrap comparison: resample the dev
//! set, re-select each table's best trial on the resample, look up its
//! full-test-set metric, and build a trimmed confidence interval over
//! the paired differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Maximize,
    Minimize,
}

impl Direction {
    /// true when `a` is a strictly better metric value than `b`.
    pub fn better(&self, a: f64, b: f64) -> bool {
        match self {
            Direction::Maximize => a > b,
            Direction::Minimize => a < b,
        }
    }
}

/// Mean absolute error.
pub fn mae(preds: &[f32], targets: &[f32]) -> Result<f32> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::Eval("mae needs equal nonempty inputs".into()));
    }
    let sum: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t).abs() as f64).sum();
    Ok((sum / preds.len() as f64) as f32)
}

/// Support-weighted mean per-class accuracy over four classes:
/// sum_c (support_c / N) * recall_c. Classes with zero support
/// contribute nothing.
pub fn ma4(pred: &[u8], truth: &[u8]) -> Result<f32> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Eval("ma4 needs equal nonempty inputs".into()));
    }
    let mut support = [0usize; N_CLASSES];
    let mut correct = [0usize; N_CLASSES];
    for (&p, &t) in pred.iter().zip(truth) {
        if (t as usize) >= N_CLASSES || (p as usize) >= N_CLASSES {
            return Err(Error::Eval(format!("class out of range: pred {} true {}", p, t)));
        }
        support[t as usize] += 1;
        if p == t {
            correct[t as usize] += 1;
        }
    }
    let n = pred.len() as f64;
    let mut acc = 0.0;
    for c in 0..N_CLASSES {
        if support[c] > 0 {
            let recall = correct[c] as f64 / support[c] as f64;
            acc += support[c] as f64 / n * recall;
        }
    }
    Ok(acc as f32)
}

/// Per-class F1, with 0 when precision + recall is 0.
pub fn classwise_f1(pred: &[u8], truth: &[u8]) -> Result<[f32; N_CLASSES]> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Eval("f1 needs equal nonempty inputs".into()));
    }
    let mut tp = [0f64; N_CLASSES];
    let mut fp = [0f64; N_CLASSES];
    let mut fn_ = [0f64; N_CLASSES];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[t as usize] += 1.0;
        } else {
            fp[p as usize] += 1.0;
            fn_[t as usize] += 1.0;
        }
    }
    let mut out = [0f32; N_CLASSES];
    for c in 0..N_CLASSES {
        let denom = 2.0 * tp[c] + fp[c] + fn_[c];
        out[c] = if denom > 0.0 { (2.0 * tp[c] / denom) as f32 } else { 0.0 };
    }
    Ok(out)
}

/// Per-example metric values for one partition: a correctness indicator
/// per example (classification) or an absolute error (regression). The
/// partition metric is their mean either way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerExampleMetrics {
    pub direction: Direction,
    pub values: Vec<f32>,
}

impl PerExampleMetrics {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len().max(1) as f64
    }

    pub fn mean_over(&self, indices: &[usize]) -> f64 {
        indices.iter().map(|&i| self.values[i] as f64).sum::<f64>() / indices.len().max(1) as f64
    }
}

/// The slice of a trial table the bootstrap needs.
pub trait TrialMetrics {
    fn dev(&self) -> &PerExampleMetrics;
    fn test_metric(&self) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub replicates: usize,
    /// challenger minus baseline, one per replicate, unsorted.
    pub diffs: Vec<f64>,
    pub interval: (f64, f64),
    pub significant: bool,
    /// (baseline trial, challenger trial) selected per replicate.
    pub selected: Vec<(usize, usize)>,
}

/// Select the best trial on resampled dev metrics; ties go to the
/// lowest trial index.
fn select_best<T: TrialMetrics>(trials: &[T], indices: &[usize], dir: Direction) -> usize {
    let mut best = 0usize;
    let mut best_val = trials[0].dev().mean_over(indices);
    for (i, t) in trials.iter().enumerate().skip(1) {
        let v = t.dev().mean_over(indices);
        if dir.better(v, best_val) {
            best = i;
            best_val = v;
        }
    }
    best
}

/// Paired, selection-aware bootstrap comparison of two trial tables
/// evaluated on the same partitions.
pub fn bootstrap_compare<T: TrialMetrics>(
    baseline: &[T],
    challenger: &[T],
    direction: Direction,
    b: usize,
    seed: u64,
) -> Result<BootstrapReport> {
    if baseline.is_empty() || challenger.is_empty() {
        return Err(Error::Eval("bootstrap needs nonempty trial tables".into()));
    }
    if b < 40 {
        return Err(Error::Eval(format!("need at least 40 replicates, got {}", b)));
    }
    let dev_len = baseline[0].dev().len();
    for t in baseline.iter().chain(challenger) {
        if t.dev().len() != dev_len || t.dev().is_empty() {
            return Err(Error::Eval(
                "all trials must share one dev partition (same per-example count)".into(),
            ));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut diffs = Vec::with_capacity(b);
    let mut selected = Vec::with_capacity(b);
    let mut indices = vec![0usize; dev_len];
    for _ in 0..b {
        for slot in indices.iter_mut() {
            *slot = rng.random_range(0..dev_len);
        }
        let bi = select_best(baseline, &indices, direction);
        let ci = select_best(challenger, &indices, direction);
        diffs.push(challenger[ci].test_metric() - baseline[bi].test_metric());
        selected.push((bi, ci));
    }

    let mut sorted = diffs.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cut = (0.025 * b as f64).ceil() as usize;
    let kept = &sorted[cut..b - cut];
    let interval = (kept[0], *kept.last().unwrap());
    let significant = !(interval.0 <= 0.0 && 0.0 <= interval.1);
    Ok(BootstrapReport { replicates: b, diffs, interval, significant, selected })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct FakeTrial {
        dev: PerExampleMetrics,
        test: f64,
    }

    impl TrialMetrics for FakeTrial {
        fn dev(&self) -> &PerExampleMetrics {
            &self.dev
        }
        fn test_metric(&self) -> f64 {
            self.test
        }
    }

    fn trial(values: &[f32], test: f64) -> FakeTrial {
        FakeTrial {
            dev: PerExampleMetrics { direction: Direction::Maximize, values: values.to_vec() },
            test,
        }
    }

    #[test]
    fn mae_cases() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[1.0, 3.0], &[2.0, 2.0]).unwrap(), 1.0);
        assert!(mae(&[], &[]).is_err());
    }

    #[test]
    fn mae_constant_predictor_equals_mean_deviation() {
        let targets: Vec<f32> = (0..50).map(|i| (i as f32 * 0.37).sin() * 2.0 + 3.0).collect();
        let mean = targets.iter().sum::<f32>() / targets.len() as f32;
        let preds = vec![mean; targets.len()];
        // brute-force oracle
        let expect =
            targets.iter().map(|t| (t - mean).abs()).sum::<f32>() / targets.len() as f32;
        assert!((mae(&preds, &targets).unwrap() - expect).abs() < 1e-6);
    }

    #[test]
    fn ma4_cases() {
        assert_eq!(ma4(&[0, 1, 2, 3], &[0, 1, 2, 3]).unwrap(), 1.0);
        assert_eq!(ma4(&[1, 2, 3, 0], &[0, 1, 2, 3]).unwrap(), 0.0);
        // confusion [[5,5],[0,10]] embedded in 4 classes:
        // class 0: 10 examples, 5 correct; class 1: 10 examples, all correct
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..5 {
            pred.push(0);
            truth.push(0);
        }
        for _ in 0..5 {
            pred.push(1);
            truth.push(0);
        }
        for _ in 0..10 {
            pred.push(1);
            truth.push(1);
        }
        assert!((ma4(&pred, &truth).unwrap() - 0.75).abs() < 1e-6);
    }

    #[test]
    fn f1_cases() {
        assert_eq!(classwise_f1(&[0, 1, 2, 3], &[0, 1, 2, 3]).unwrap(), [1.0; 4]);
        // class never predicted and never true -> 0 by convention
        let f1 = classwise_f1(&[0, 0], &[0, 0]).unwrap();
        assert_eq!(f1[3], 0.0);
        // precision 0.5, recall 1.0 -> 2/3
        let f1 = classwise_f1(&[0, 0, 1], &[0, 1, 1]).unwrap();
        assert!((f1[0] - 2.0 / 3.0).abs() < 1e-6);
    }

    proptest::proptest! {
        /// Support-weighted recall coincides with plain accuracy.
        #[test]
        fn ma4_equals_accuracy(
            pairs in proptest::collection::vec((0u8..4, 0u8..4), 1..60)
        ) {
            let pred: Vec<u8> = pairs.iter().map(|p| p.0).collect();
            let truth: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            let acc = pred.iter().zip(&truth).filter(|(a, b)| a == b).count() as f32
                / pred.len() as f32;
            proptest::prop_assert!((ma4(&pred, &truth).unwrap() - acc).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_tables_not_significant() {
        let trials = vec![trial(&[1.0, 0.0, 1.0], 0.7), trial(&[0.0, 1.0, 1.0], 0.6)];
        let same = vec![trial(&[1.0, 0.0, 1.0], 0.7), trial(&[0.0, 1.0, 1.0], 0.6)];
        let r = bootstrap_compare(&trials, &same, Direction::Maximize, 1000, 0).unwrap();
        assert!(r.diffs.iter().all(|&d| d == 0.0));
        assert_eq!(r.interval, (0.0, 0.0));
        assert!(!r.significant);
    }

    #[test]
    fn constant_shift_is_significant() {
        let base = vec![trial(&[1.0, 0.0, 1.0], 0.6), trial(&[0.0, 1.0, 1.0], 0.5)];
        let chall = vec![trial(&[1.0, 0.0, 1.0], 0.7), trial(&[0.0, 1.0, 1.0], 0.6)];
        let r = bootstrap_compare(&base, &chall, Direction::Maximize, 1000, 1).unwrap();
        assert!(r.diffs.iter().all(|&d| (d - 0.1).abs() < 1e-12));
        assert!(r.significant);
    }

    #[test]
    fn selection_frequencies_match_exhaustive_enumeration() {
        // dev size 3, two trials with hand-set per-example dev metrics
        let base = vec![trial(&[1.0, 0.0, 0.0], 0.3), trial(&[0.0, 1.0, 1.0], 0.4)];
        // enumerate all 27 resamples: trial 0 wins when its resampled mean
        // is strictly better, ties break to trial 0 (lowest index)
        let mut wins0 = 0usize;
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    let m0: f32 = [a, b, c].iter().map(|&i| base[0].dev.values[i]).sum();
                    let m1: f32 = [a, b, c].iter().map(|&i| base[1].dev.values[i]).sum();
                    if m0 >= m1 {
                        wins0 += 1;
                    }
                }
            }
        }
        let expect0 = wins0 as f64 / 27.0;

        let b = 30_000usize;
        let r = bootstrap_compare(&base, &base, Direction::Maximize, b, 7).unwrap();
        let got0 =
            r.selected.iter().filter(|&&(bi, _)| bi == 0).count() as f64 / b as f64;
        assert!(
            (got0 - expect0).abs() < 0.02,
            "selection rate {} vs exhaustive {}",
            got0,
            expect0
        );
    }

    #[test]
    fn deterministic_given_seed_and_tie_break_is_lowest_id() {
        let base = vec![trial(&[1.0, 1.0, 0.0], 0.5), trial(&[1.0, 1.0, 0.0], 0.9)];
        let r1 = bootstrap_compare(&base, &base, Direction::Maximize, 200, 5).unwrap();
        let r2 = bootstrap_compare(&base, &base, Direction::Maximize, 200, 5).unwrap();
        assert_eq!(r1, r2);
        // identical dev rows: the lower index must always be selected
        assert!(r1.selected.iter().all(|&(b, c)| b == 0 && c == 0));
    }

    #[test]
    fn small_b_rejected_and_minimize_direction() {
        let base = vec![trial(&[0.1, 0.2], 0.5)];
        assert!(bootstrap_compare(&base, &base, Direction::Minimize, 39, 0).is_err());
        // minimize: challenger with lower error is selected
        let t0 = FakeTrial {
            dev: PerExampleMetrics {
                direction: Direction::Minimize,
                values: vec![0.9, 0.9],
            },
            test: 0.9,
        };
        let t1 = FakeTrial {
            dev: PerExampleMetrics {
                direction: Direction::Minimize,
                values: vec![0.1, 0.1],
            },
            test: 0.1,
        };
        let r = bootstrap_compare(&[t0], &[t1], Direction::Minimize, 100, 0).unwrap();
        assert!(r.significant);
        assert!(r.interval.1 < 0.0);
    }

    /// Noise-only tables drawn from one distribution. The procedure only
    /// sees selection uncertainty, so the tables need enough near-tied
    /// trials that dev resampling actually flips the selected trial.
    pub(crate) fn noise_only_table(rng: &mut ChaCha8Rng, n_trials: usize, dev_n: usize) -> Vec<(PerExampleMetrics, f64)> {
        (0..n_trials)
            .map(|_| {
                let values: Vec<f32> = (0..dev_n)
                    .map(|_| if rng.random::<f32>() < 0.6 { 1.0 } else { 0.0 })
                    .collect();
                let test = 0.6 + 0.05 * (rng.random::<f64>() - 0.5);
                (PerExampleMetrics { direction: Direction::Maximize, values }, test)
            })
            .collect()
    }

    #[test]
    fn false_positive_rate_is_controlled() {
        let mut significant = 0usize;
        let n_runs = 50;
        for run in 0..n_runs {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + run);
            let to_trials = |t: Vec<(PerExampleMetrics, f64)>| -> Vec<FakeTrial> {
                t.into_iter().map(|(dev, test)| FakeTrial { dev, test }).collect()
            };
            let base = to_trials(noise_only_table(&mut rng, 8, 30));
            let chall = to_trials(noise_only_table(&mut rng, 8, 30));
            let r = bootstrap_compare(&base, &chall, Direction::Maximize, 400, 12345 + run)
                .unwrap();
            if r.significant {
                significant += 1;
            }
        }
        let rate = significant as f64 / n_runs as f64;
        assert!(rate <= 0.10, "false positive rate {}", rate);
    }
}
