//! Confusion counts and the accuracy / TPR / TNR triple. Ciphertexts of the
//! first message are the positive class.

use serde::{Deserialize, Serialize};

use crate::data::ClassLabel;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        ConfusionCounts { tp, tn, fp, fn_ }
    }

    pub fn record(&mut self, actual: ClassLabel, predicted: ClassLabel) {
        match (actual, predicted) {
            (ClassLabel::First, ClassLabel::First) => self.tp += 1,
            (ClassLabel::First, ClassLabel::Second) => self.fn_ += 1,
            (ClassLabel::Second, ClassLabel::Second) => self.tn += 1,
            (ClassLabel::Second, ClassLabel::First) => self.fp += 1,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (ClassLabel, ClassLabel)>) -> Self {
        let mut c = ConfusionCounts::default();
        for (a, p) in pairs {
            c.record(a, p);
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// `tpr` / `tnr` are `None` when the corresponding class is absent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub accuracy: f64,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
}

pub fn compute_metrics(c: &ConfusionCounts) -> Result<Rates> {
    let total = c.total();
    if total == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    Ok(Rates {
        accuracy: (c.tp + c.tn) as f64 / total as f64,
        tpr: ratio(c.tp, c.tp + c.fn_),
        tnr: ratio(c.tn, c.tn + c.fp),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_half() {
        let r = compute_metrics(&ConfusionCounts::new(50, 50, 0, 0)).unwrap();
        assert_eq!((r.accuracy, r.tpr, r.tnr), (1.0, Some(1.0), Some(1.0)));
        let r = compute_metrics(&ConfusionCounts::new(25, 25, 25, 25)).unwrap();
        assert_eq!((r.accuracy, r.tpr, r.tnr), (0.5, Some(0.5), Some(0.5)));
    }

    #[test]
    fn absent_class_is_not_applicable() {
        let r = compute_metrics(&ConfusionCounts::new(0, 7, 3, 0)).unwrap();
        assert_eq!(r.tpr, None);
        assert_eq!(r.tnr, Some(0.7));
        assert!(matches!(
            compute_metrics(&ConfusionCounts::default()),
            Err(Error::EmptyEvaluation)
        ));
    }

    #[test]
    fn record_maps_first_to_positive() {
        let c = ConfusionCounts::from_pairs([
            (ClassLabel::First, ClassLabel::First),
            (ClassLabel::First, ClassLabel::Second),
            (ClassLabel::Second, ClassLabel::Second),
            (ClassLabel::Second, ClassLabel::First),
            (ClassLabel::Second, ClassLabel::First),
        ]);
        assert_eq!(c, ConfusionCounts::new(1, 1, 2, 1));
        assert_eq!(c.total(), 5);
    }
}
