//! Imbalance-sensitive binary metrics, threshold sweeps and repeated-run
//! summaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn from_predictions(predictions: &[bool], labels: &[bool]) -> Self {
        let mut c = ConfusionCounts::default();
        for (&p, &y) in predictions.iter().zip(labels) {
            match (p, y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub balanced_accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub mcc: f64,
    pub pr_auc: f64,
    pub positive_rate: f64,
}

impl MetricsReport {
    pub const NAMES: [&'static str; 8] = [
        "accuracy",
        "macro_f1",
        "balanced_accuracy",
        "sensitivity",
        "specificity",
        "mcc",
        "pr_auc",
        "positive_rate",
    ];

    pub fn values(&self) -> [f64; 8] {
        [
            self.accuracy,
            self.macro_f1,
            self.balanced_accuracy,
            self.sensitivity,
            self.specificity,
            self.mcc,
            self.pr_auc,
            self.positive_rate,
        ]
    }

    pub fn from_values(v: [f64; 8]) -> Self {
        Self {
            accuracy: v[0],
            macro_f1: v[1],
            balanced_accuracy: v[2],
            sensitivity: v[3],
            specificity: v[4],
            mcc: v[5],
            pr_auc: v[6],
            positive_rate: v[7],
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Self::NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| self.values()[i])
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    ratio(2 * tp, 2 * tp + fp + fn_)
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Empty("no scores to evaluate".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::InvalidInput(format!("score {s} outside [0,1]")));
    }
    Ok(())
}

/// Metrics from confusion counts alone (PR-AUC is left at zero).
pub fn metrics_from_counts(c: ConfusionCounts) -> MetricsReport {
    let n = c.total();
    let sensitivity = ratio(c.tp, c.tp + c.fn_);
    let specificity = ratio(c.tn, c.tn + c.fp);
    let den = ((c.tp + c.fp) as f64
        * (c.tp + c.fn_) as f64
        * (c.tn + c.fp) as f64
        * (c.tn + c.fn_) as f64)
        .sqrt();
    let mcc = if den == 0.0 {
        0.0
    } else {
        (c.tp as f64 * c.tn as f64 - c.fp as f64 * c.fn_ as f64) / den
    };
    MetricsReport {
        accuracy: ratio(c.tp + c.tn, n),
        macro_f1: 0.5 * (f1(c.tp, c.fp, c.fn_) + f1(c.tn, c.fn_, c.fp)),
        balanced_accuracy: 0.5 * (sensitivity + specificity),
        sensitivity,
        specificity,
        mcc,
        pr_auc: 0.0,
        positive_rate: ratio(c.tp + c.fp, n),
    }
}

/// Full report at `threshold` (prediction = score ≥ threshold). PR-AUC is
/// reported as 0 when the labels contain no positive.
pub fn evaluate(scores: &[f64], labels: &[bool], threshold: f64) -> Result<MetricsReport> {
    check_inputs(scores, labels)?;
    let preds: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    let mut report = metrics_from_counts(ConfusionCounts::from_predictions(&preds, labels));
    if labels.iter().any(|&y| y) {
        report.pr_auc = pr_auc(scores, labels)?;
    }
    Ok(report)
}

/// Step-wise average precision: Σ precision·Δrecall over descending score
/// groups, tied scores entering together.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 {
        return Err(Error::InvalidInput(
            "average precision needs at least one positive".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut group_pos = 0;
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                group_pos += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        tp += group_pos;
        if group_pos > 0 {
            ap += (tp as f64 / (tp + fp) as f64) * (group_pos as f64 / positives as f64);
        }
    }
    Ok(ap)
}

/// The sweep grid 0.00, 0.05, …, 1.00.
pub fn default_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCurve {
    pub thresholds: Vec<f64>,
    pub reports: Vec<MetricsReport>,
}

impl ThresholdCurve {
    pub fn positive_rates(&self) -> Vec<f64> {
        self.reports.iter().map(|r| r.positive_rate).collect()
    }

    /// Report at the grid point closest to `threshold`.
    pub fn at(&self, threshold: f64) -> Option<&MetricsReport> {
        self.thresholds
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - threshold).abs().total_cmp(&(b.1 - threshold).abs()))
            .map(|(i, _)| &self.reports[i])
    }

    /// Delimited text: threshold followed by every metric.
    pub fn to_csv(&self) -> String {
        let mut out = format!("threshold,{}\n", MetricsReport::NAMES.join(","));
        for (t, r) in self.thresholds.iter().zip(&self.reports) {
            let vals: Vec<String> = r.values().iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&format!("{t:.2},{}\n", vals.join(",")));
        }
        out
    }
}

pub fn threshold_sweep(scores: &[f64], labels: &[bool], grid: &[f64]) -> Result<ThresholdCurve> {
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput(
            "threshold grid must be strictly increasing".into(),
        ));
    }
    let reports = grid
        .iter()
        .map(|&t| evaluate(scores, labels, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(ThresholdCurve {
        thresholds: grid.to_vec(),
        reports,
    })
}

/// Per-metric mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: MetricsReport,
    pub std: MetricsReport,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(reports: &[MetricsReport]) -> Result<Summary> {
    if reports.is_empty() {
        return Err(Error::Empty("no reports to summarize".into()));
    }
    let mut mean = [0.0; 8];
    let mut std = [0.0; 8];
    for k in 0..8 {
        let col: Vec<f64> = reports.iter().map(|r| r.values()[k]).collect();
        (mean[k], std[k]) = mean_std(&col);
    }
    Ok(Summary {
        n: reports.len(),
        mean: MetricsReport::from_values(mean),
        std: MetricsReport::from_values(std),
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn all_positive_on_three_to_one() {
        let r = evaluate(&[0.9, 0.8, 0.7, 0.6], &[true, true, true, false], 0.5).unwrap();
        assert_abs_diff_eq!(r.accuracy, 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(r.macro_f1, 3.0 / 7.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.balanced_accuracy, 0.5, epsilon = 1e-12);
        assert_eq!(r.specificity, 0.0);
        assert_eq!(r.mcc, 0.0);
        assert_eq!(r.positive_rate, 1.0);
    }

    #[test]
    fn perfect_predictor() {
        let r = evaluate(&[0.9, 0.1, 0.8, 0.3], &[true, false, true, false], 0.5).unwrap();
        for v in [
            r.accuracy,
            r.macro_f1,
            r.balanced_accuracy,
            r.sensitivity,
            r.specificity,
            r.mcc,
            r.pr_auc,
        ] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn pr_auc_degenerate_cases() {
        assert_eq!(pr_auc(&[0.9, 0.8, 0.2], &[true, true, false]).unwrap(), 1.0);
        assert_abs_diff_eq!(
            pr_auc(&[0.5; 5], &[true, false, false, true, false]).unwrap(),
            0.4,
            epsilon = 1e-12
        );
        assert!(pr_auc(&[0.5, 0.4], &[false, false]).is_err());
    }

    #[test]
    fn empty_and_mismatched_inputs_fail() {
        assert!(evaluate(&[], &[], 0.5).is_err());
        assert!(evaluate(&[0.1], &[true, false], 0.5).is_err());
        assert!(evaluate(&[1.5], &[true], 0.5).is_err());
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn summary_examples() {
        let accs = [0.75, 0.75, 1.0, 1.0];
        let (m, s) = mean_std(&accs);
        assert_abs_diff_eq!(m, 0.875, epsilon = 1e-12);
        assert_abs_diff_eq!(s, 0.144_337_567, epsilon = 1e-8);
        let (m, s) = mean_std(&[3.0 / 7.0, 3.0 / 7.0, 1.0, 1.0]);
        assert_abs_diff_eq!(m, 5.0 / 7.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s, 0.329_914, epsilon = 1e-6);
        assert_eq!(mean_std(&[0.3]), (0.3, 0.0));
        let r = evaluate(&[0.6, 0.2], &[true, false], 0.5).unwrap();
        let s = summarize(&[r, r, r]).unwrap();
        assert_eq!(s.std, MetricsReport::default());
        assert_eq!(s.mean, r);
    }

    #[test]
    fn sweep_endpoints() {
        let scores = [0.1, 0.4, 0.95, 0.6];
        let labels = [false, true, true, false];
        let c = threshold_sweep(&scores, &labels, &default_grid()).unwrap();
        assert_eq!(c.thresholds.len(), 21);
        assert_eq!(c.reports[0].positive_rate, 1.0);
        assert_eq!(c.reports[20].positive_rate, 0.0);
        assert_eq!(c.at(0.5).unwrap().positive_rate, 0.5);
        assert!(c.to_csv().lines().nth(11).unwrap().starts_with("0.50,"));
        assert!(threshold_sweep(&scores, &labels, &[0.5, 0.5]).is_err());
    }

    proptest! {
        #[test]
        fn metrics_are_permutation_invariant(
            pairs in prop::collection::vec((0.0..=1.0f64, any::<bool>()), 1..30),
            rot in 0usize..30,
        ) {
            let (s, l): (Vec<f64>, Vec<bool>) = pairs.iter().cloned().unzip();
            let k = rot % s.len();
            let mut s2 = s.clone();
            let mut l2 = l.clone();
            s2.rotate_left(k);
            l2.rotate_left(k);
            s2.reverse();
            l2.reverse();
            let a = evaluate(&s, &l, 0.5).unwrap();
            let b = evaluate(&s2, &l2, 0.5).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn degenerate_predictors(labels in prop::collection::vec(any::<bool>(), 1..20)) {
            let all_pos = evaluate(&vec![1.0; labels.len()], &labels, 0.5).unwrap();
            prop_assert_eq!(all_pos.specificity, 0.0);
            prop_assert_eq!(all_pos.mcc, 0.0);
            prop_assert_eq!(all_pos.positive_rate, 1.0);
            let has_pos = labels.iter().any(|&y| y);
            let has_neg = labels.iter().any(|&y| !y);
            if has_pos && has_neg {
                prop_assert_eq!(all_pos.balanced_accuracy, 0.5);
            }
            let all_neg = evaluate(&vec![0.0; labels.len()], &labels, 0.5).unwrap();
            prop_assert_eq!(all_neg.sensitivity, 0.0);
            prop_assert_eq!(all_neg.mcc, 0.0);
            prop_assert_eq!(all_neg.positive_rate, 0.0);
            if has_pos && has_neg {
                prop_assert_eq!(all_neg.balanced_accuracy, 0.5);
            }
        }
    }
}
