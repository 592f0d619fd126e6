//! Confusion-matrix metrics: MCC, precision, recall, F1.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("probability and label lists differ in length: {probs} vs {labels}")]
    LengthMismatch { probs: usize, labels: usize },
}

/// Binary confusion counts. The positive class is label 1 (damaged line).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Counts as seen from the opposite class (healthy lines as positives).
    pub fn swapped(&self) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tn,
            tn: self.tp,
            fp: self.fn_,
            fn_: self.fp,
        }
    }
}

/// Which class plays the role of "positive" when computing precision/recall/F1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositiveClass {
    /// Label 1: partial-discharge (damaged) measurements.
    Pd,
    /// Label 0: healthy measurements.
    NonPd,
}

/// Precision, recall, and F1 for one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Tallies predictions at `threshold`. A probability exactly at the threshold
/// counts as a positive prediction.
pub fn confusion(probs: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionCounts, MetricsError> {
    if probs.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            probs: probs.len(),
            labels: labels.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &y) in probs.iter().zip(labels) {
        match (p >= threshold, y != 0) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Matthews correlation coefficient. Returns 0 when any factor of the
/// denominator is zero.
pub fn mcc(c: ConfusionCounts) -> f64 {
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if denom == 0.0 {
        return 0.0;
    }
    (tp * tn - fp * fn_) / denom.sqrt()
}

/// Precision/recall/F1 for the requested positive class. Empty denominators
/// yield 0 so evaluation is a total function.
pub fn precision_recall_f1(c: ConfusionCounts, positive: PositiveClass) -> Prf {
    let c = match positive {
        PositiveClass::Pd => c,
        PositiveClass::NonPd => c.swapped(),
    };
    let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
    let precision = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
    let recall = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf { precision, recall, f1 }
}

/// Unweighted mean of the per-class scores (the "Overall" row of the report).
pub fn macro_average(c: ConfusionCounts) -> Prf {
    let pd = precision_recall_f1(c, PositiveClass::Pd);
    let non_pd = precision_recall_f1(c, PositiveClass::NonPd);
    Prf {
        precision: 0.5 * (pd.precision + non_pd.precision),
        recall: 0.5 * (pd.recall + non_pd.recall),
        f1: 0.5 * (pd.f1 + non_pd.f1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_tallies_and_tie_rule() {
        let c = confusion(&[0.9, 0.1], &[1, 0], 0.5).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, tn: 1, fp: 0, fn_: 0 });

        // p exactly at the threshold predicts positive
        let c = confusion(&[0.5], &[1], 0.5).unwrap();
        assert_eq!(c.tp, 1);

        // all predictions wrong
        let c = confusion(&[0.9, 0.1], &[0, 1], 0.5).unwrap();
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (0, 0, 1, 1));
    }

    #[test]
    fn confusion_rejects_length_mismatch() {
        assert_eq!(
            confusion(&[0.5, 0.5], &[1], 0.5),
            Err(MetricsError::LengthMismatch { probs: 2, labels: 1 })
        );
    }

    #[test]
    // The reference value 0.7071 happens to round 1/sqrt(2); it is quoted as
    // a four-digit tolerance check, not used as the constant.
    #[allow(clippy::approx_constant)]
    fn mcc_known_values() {
        assert_eq!(mcc(ConfusionCounts { tp: 1, tn: 1, fp: 0, fn_: 0 }), 1.0);
        assert_eq!(mcc(ConfusionCounts { tp: 50, tn: 50, fp: 50, fn_: 50 }), 0.0);
        let v = mcc(ConfusionCounts { tp: 2, tn: 3, fp: 1, fn_: 0 });
        assert!((v - 6.0 / 72.0_f64.sqrt()).abs() < 1e-15);
        assert!((v - 0.7071).abs() < 1e-4);
    }

    #[test]
    fn mcc_swap_symmetry() {
        for tp in 0..6u64 {
            for tn in 0..6u64 {
                for fp in 0..6u64 {
                    for fn_ in 0..6u64 {
                        let c = ConfusionCounts { tp, tn, fp, fn_ };
                        let m = mcc(c);
                        assert_eq!(m, mcc(c.swapped()));
                        assert!((-1.0..=1.0).contains(&m) || m == 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn prf_known_values() {
        let perfect = ConfusionCounts { tp: 4, tn: 6, fp: 0, fn_: 0 };
        assert_eq!(
            precision_recall_f1(perfect, PositiveClass::Pd),
            Prf { precision: 1.0, recall: 1.0, f1: 1.0 }
        );

        let no_tp = ConfusionCounts { tp: 0, tn: 1, fp: 3, fn_: 0 };
        assert_eq!(precision_recall_f1(no_tp, PositiveClass::Pd).precision, 0.0);

        let c = ConfusionCounts { tp: 45, tn: 0, fp: 5, fn_: 10 };
        let prf = precision_recall_f1(c, PositiveClass::Pd);
        assert!((prf.precision - 0.9).abs() < 1e-12);
        assert!((prf.recall - 45.0 / 55.0).abs() < 1e-12);
        assert!((prf.f1 - 6.0 / 7.0).abs() < 1e-12);
        assert!((prf.recall - 0.8182).abs() < 1e-4);
        assert!((prf.f1 - 0.8571).abs() < 1e-4);
    }

    #[test]
    fn f1_is_harmonic_mean() {
        for tp in 0..8u64 {
            for fp in 0..8u64 {
                for fn_ in 0..8u64 {
                    let prf =
                        precision_recall_f1(ConfusionCounts { tp, tn: 3, fp, fn_ }, PositiveClass::Pd);
                    let arith = 0.5 * (prf.precision + prf.recall);
                    assert!(prf.f1 <= arith + 1e-12);
                    if (prf.precision - prf.recall).abs() < 1e-15 {
                        assert!((prf.f1 - arith).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
