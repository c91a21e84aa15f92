use crate::error::{Error, Result};
use crate::pipeline::raster::{check_dims, Raster};

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

    pub fn merge(&self, other: &ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + other.tp,
            tn: self.tn + other.tn,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
        }
    }
}

fn check_binary(op: &'static str, what: &str, m: &Raster<u8>) -> Result<()> {
    match m.data().iter().find(|&&v| v > 1) {
        Some(v) => Err(Error::invalid(op, format!("{what} mask holds non-binary value {v}"))),
        None => Ok(()),
    }
}

/// Counts outcomes over the pixels where `fov` is 1 (every pixel when
/// `fov` is `None`).
pub fn confusion(pred: &Raster<u8>, truth: &Raster<u8>, fov: Option<&Raster<u8>>) -> Result<ConfusionCounts> {
    check_dims("confusion", pred, truth)?;
    check_binary("confusion", "prediction", pred)?;
    check_binary("confusion", "truth", truth)?;
    if let Some(f) = fov {
        check_dims("confusion", pred, f)?;
        check_binary("confusion", "field-of-view", f)?;
    }
    let mut cc = ConfusionCounts::default();
    for i in 0..pred.len() {
        if fov.is_some_and(|f| f.data()[i] == 0) {
            continue;
        }
        match (pred.data()[i], truth.data()[i]) {
            (1, 1) => cc.tp += 1,
            (0, 0) => cc.tn += 1,
            (1, 0) => cc.fp += 1,
            _ => cc.fn_ += 1,
        }
    }
    Ok(cc)
}

/// A ratio that is 0 and marked undefined when its denominator vanishes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ratio {
    pub value: f64,
    pub defined: bool,
}

impl Ratio {
    pub fn of(num: u64, den: u64) -> Ratio {
        if den == 0 {
            Ratio {
                value: 0.0,
                defined: false,
            }
        } else {
            Ratio {
                value: num as f64 / den as f64,
                defined: true,
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BasicMetrics {
    pub acc: Ratio,
    /// Specificity `TN / (TN + FP)`.
    pub sp: Ratio,
    /// Sensitivity (recall) `TP / (TP + FN)`.
    pub se: Ratio,
    pub precision: Ratio,
    /// Harmonic mean of precision and sensitivity, `2TP / (2TP + FP + FN)`.
    pub f1: Ratio,
}

pub fn basic_metrics(cc: &ConfusionCounts) -> BasicMetrics {
    BasicMetrics {
        acc: Ratio::of(cc.tp + cc.tn, cc.total()),
        sp: Ratio::of(cc.tn, cc.tn + cc.fp),
        se: Ratio::of(cc.tp, cc.tp + cc.fn_),
        precision: Ratio::of(cc.tp, cc.tp + cc.fp),
        f1: Ratio::of(2 * cc.tp, 2 * cc.tp + cc.fp + cc.fn_),
    }
}
