//! Pixel-level overlap metrics.
//!
//! Both metrics are undefined when prediction and ground truth are empty;
//! that case scores 1.0 (nothing to find, nothing found).

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

pub fn confusion(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
    }
    let mut c = ConfusionCounts::default();
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => return Err(Error::NonBinaryMask { value: p.max(g), index: i }),
        }
    }
    Ok(c)
}

/// Dice coefficient `2TP / (2TP + FN + FP)`.
pub fn dic(c: &ConfusionCounts) -> f64 {
    let den = 2 * c.tp + c.fn_ + c.fp;
    if den == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / den as f64
    }
}

/// Jaccard index `TP / (TP + FN + FP)`.
pub fn jsc(c: &ConfusionCounts) -> f64 {
    let den = c.tp + c.fn_ + c.fp;
    if den == 0 {
        1.0
    } else {
        c.tp as f64 / den as f64
    }
}

/// Mean DIC and JSC over per-image confusion counts.
pub fn mean_scores(counts: &[ConfusionCounts]) -> (f64, f64) {
    if counts.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = counts.len() as f64;
    let d = counts.iter().map(dic).sum::<f64>() / n;
    let j = counts.iter().map(jsc).sum::<f64>() / n;
    (d, j)
}
