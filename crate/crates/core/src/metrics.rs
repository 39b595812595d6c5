//! Confusion tallies and the accuracy / precision / recall / F1 / IoU / Dice suite.

use crate::error::{Error, Result};
use crate::loss::NODATA;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    pub nodata_skipped: u64,
}

impl ConfusionCounts {
    pub fn scored(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn total(&self) -> u64 {
        self.scored() + self.nodata_skipped
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
        self.nodata_skipped += other.nodata_skipped;
    }
}

/// Tallies `pred` against `truth`. A pixel is skipped as nodata when either
/// mask holds [`NODATA`] there; any other nonzero value counts as positive.
pub fn confusion_counts(pred: &[u8], truth: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::mismatch(
            "confusion_counts",
            &[pred.len()],
            &[truth.len()],
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        if p == NODATA || t == NODATA {
            c.nodata_skipped += 1;
            continue;
        }
        match (p != 0, t != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub const METRIC_NAMES: [&str; 6] = ["accuracy", "precision", "recall", "f1", "iou", "dice"];

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricSet {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub dice: f64,
    /// Set when some metric hit a 0/0 and was defined as 0.
    pub degenerate: bool,
}

impl MetricSet {
    /// Values in [`METRIC_NAMES`] order.
    pub fn values(&self) -> [f64; 6] {
        [
            self.accuracy,
            self.precision,
            self.recall,
            self.f1,
            self.iou,
            self.dice,
        ]
    }

    pub fn from_values(v: [f64; 6], degenerate: bool) -> Self {
        MetricSet {
            accuracy: v[0],
            precision: v[1],
            recall: v[2],
            f1: v[3],
            iou: v[4],
            dice: v[5],
            degenerate,
        }
    }
}

pub fn f1_from_precision_recall(precision: f64, recall: f64) -> f64 {
    ratio(2.0 * precision * recall, precision + recall).0
}

pub fn iou_from_f1(f1: f64) -> f64 {
    f1 / (2.0 - f1)
}

fn ratio(num: f64, den: f64) -> (f64, bool) {
    if den == 0.0 {
        (0.0, true)
    } else {
        (num / den, false)
    }
}

pub fn metrics_from_counts(c: &ConfusionCounts) -> Result<MetricSet> {
    let total = c.scored();
    if total == 0 {
        return Err(Error::Contract(
            "metrics need at least one scored pixel".into(),
        ));
    }
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let (accuracy, _) = ratio(tp + tn, total as f64);
    let (precision, d1) = ratio(tp, tp + fp);
    let (recall, d2) = ratio(tp, tp + fn_);
    let (f1, d3) = ratio(2.0 * precision * recall, precision + recall);
    let (iou, d4) = ratio(tp, tp + fp + fn_);
    let (dice, d5) = ratio(2.0 * tp, 2.0 * tp + fp + fn_);
    Ok(MetricSet {
        accuracy,
        precision,
        recall,
        f1,
        iou,
        dice,
        degenerate: d1 || d2 || d3 || d4 || d5,
    })
}

/// Per-metric mean and sample standard deviation (divisor N − 1) across sites.
///
/// A single site yields a zero standard deviation flagged degenerate.
pub fn aggregate(sets: &[MetricSet]) -> Result<(MetricSet, MetricSet)> {
    if sets.is_empty() {
        return Err(Error::Contract(
            "cannot aggregate an empty metric list".into(),
        ));
    }
    let n = sets.len() as f64;
    let mut mean = [0.0; 6];
    for s in sets {
        for (m, v) in mean.iter_mut().zip(s.values()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut std = [0.0; 6];
    if sets.len() > 1 {
        for s in sets {
            for ((acc, v), m) in std.iter_mut().zip(s.values()).zip(mean) {
                *acc += (v - m) * (v - m);
            }
        }
        std.iter_mut().for_each(|s| *s = (*s / (n - 1.0)).sqrt());
    }
    let any_degenerate = sets.iter().any(|s| s.degenerate);
    Ok((
        MetricSet::from_values(mean, any_degenerate),
        MetricSet::from_values(std, any_degenerate || sets.len() == 1),
    ))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn four_pixel_example() {
        let c = confusion_counts(&[1, 0, 1, 0], &[1, 1, 0, 0]).unwrap();
        assert_eq!((c.tp, c.fn_, c.fp, c.tn), (1, 1, 1, 1));
        let m = metrics_from_counts(&c).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 0.5);
        assert_eq!(m.f1, 0.5);
        assert!((m.iou - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.dice, 0.5);
        assert!(!m.degenerate);
    }

    #[test]
    fn identity_has_no_errors() {
        let mask = [1u8, 0, 0, 1, 1, 0, 1];
        let c = confusion_counts(&mask, &mask).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
    }

    #[test]
    fn nodata_is_skipped() {
        let c = confusion_counts(&[1, 1, 0, 1], &[1, NODATA, NODATA, 0]).unwrap();
        assert_eq!(c.nodata_skipped, 2);
        assert_eq!(c.total(), 4);
        assert_eq!((c.tp, c.fp), (1, 1));
    }

    #[test]
    fn table_rows_from_precision_recall() {
        // EMSR744 and EMSR747 rows: (precision, recall) → (F1, IoU). Inputs
        // are rounded to three places, which alone moves F1 by up to ~1.1e-3.
        let tol = 1.5e-3;
        let f1 = f1_from_precision_recall(0.944, 0.921);
        assert!((f1 - 0.932).abs() < tol);
        assert!((iou_from_f1(f1) - 0.873).abs() < tol);
        let f1 = f1_from_precision_recall(0.353, 0.974);
        assert!((f1 - 0.519).abs() < tol);
        assert!((iou_from_f1(f1) - 0.350).abs() < tol);
    }

    #[test]
    fn zero_denominators_are_flagged() {
        let c = ConfusionCounts {
            tn: 10,
            ..Default::default()
        };
        let m = metrics_from_counts(&c).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(
            (m.precision, m.recall, m.f1, m.iou, m.dice),
            (0.0, 0.0, 0.0, 0.0, 0.0)
        );
        assert!(m.degenerate);
        assert!(metrics_from_counts(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn aggregate_mean_sample_std_and_degenerate_cases() {
        let a = MetricSet::from_values([1.0; 6], false);
        let b = MetricSet::from_values([0.0; 6], false);
        let (mean, std) = aggregate(&[a, b]).unwrap();
        assert_eq!(mean.values(), [0.5; 6]);
        let want = (0.5f64).sqrt();
        assert!(std.values().iter().all(|&s| (s - want).abs() < 1e-15));

        let (mean, std) = aggregate(&[a]).unwrap();
        assert_eq!(mean.values(), a.values());
        assert_eq!(std.values(), [0.0; 6]);
        assert!(std.degenerate);

        assert!(aggregate(&[]).is_err());
    }

    proptest! {
        #[test]
        fn f1_equals_dice_and_iou_identity(tp in 0u64..1000, fp in 0u64..1000, tn in 0u64..1000, fn_ in 0u64..1000) {
            prop_assume!(tp + fp + tn + fn_ > 0);
            let c = ConfusionCounts { tp, fp, tn, fn_, nodata_skipped: 0 };
            let m = metrics_from_counts(&c).unwrap();
            prop_assert!((m.f1 - m.dice).abs() <= 1e-12);
            prop_assert!((m.iou - iou_from_f1(m.f1)).abs() <= 1e-12);
            prop_assert!(m.iou <= m.f1 + 1e-15);
            for v in m.values() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn nodata_relabeling_does_not_change_metrics(
            pairs in proptest::collection::vec((0u8..2, 0u8..2, proptest::bool::ANY), 1..200)
        ) {
            let pred: Vec<u8> = pairs.iter().map(|p| p.0).collect();
            let truth: Vec<u8> = pairs.iter().map(|p| if p.2 { NODATA } else { p.1 }).collect();
            // whatever the prediction says under nodata is irrelevant
            let flipped: Vec<u8> = pairs.iter().map(|p| if p.2 { 1 - p.0 } else { p.0 }).collect();
            let a = confusion_counts(&pred, &truth).unwrap();
            let b = confusion_counts(&flipped, &truth).unwrap();
            prop_assert_eq!(a, b);
            prop_assert_eq!(a.total(), pairs.len() as u64);
        }
    }
}
