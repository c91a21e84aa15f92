use crate::error::{Error, Result};
use crate::pipeline::raster::{check_dims, Raster};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    /// Pixels scoring `≥ threshold` are called positive; the first point
    /// uses `+∞`.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Roc {
    pub points: Vec<RocPoint>,
    pub auc: f64,
    /// False when one class is absent; `auc` is then 0.
    pub defined: bool,
    pub positives: u64,
    pub negatives: u64,
}

impl Roc {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            if p.threshold.is_infinite() {
                out.push_str(&format!("inf,{},{}\n", p.fpr, p.tpr));
            } else {
                out.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
            }
        }
        out
    }
}

/// ROC curve over every distinct score and its trapezoidal area.
pub fn roc(scores: &[f64], labels: &[bool]) -> Result<Roc> {
    if scores.len() != labels.len() {
        return Err(Error::shape("roc", &[scores.len()], &[labels.len()]));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::invalid("roc", format!("non-finite score {s}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    let negatives = labels.len() as u64 - positives;
    let rate = |n: u64, of: u64| if of == 0 { 0.0 } else { n as f64 / of as f64 };

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = *points.last().expect("starts with the origin");
        let p = RocPoint {
            threshold: t,
            fpr: rate(fp, negatives),
            tpr: rate(tp, positives),
        };
        auc += (p.fpr - prev.fpr) * (p.tpr + prev.tpr) / 2.0;
        points.push(p);
    }
    let defined = positives > 0 && negatives > 0;
    Ok(Roc {
        points,
        auc: if defined { auc } else { 0.0 },
        defined,
        positives,
        negatives,
    })
}

/// Pools the field-of-view pixels of several images into one ROC.
pub fn pooled_roc(images: &[(&Raster<f64>, &Raster<u8>, Option<&Raster<u8>>)]) -> Result<Roc> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for &(prob, truth, fov) in images {
        check_dims("roc", prob, truth)?;
        if let Some(f) = fov {
            check_dims("roc", prob, f)?;
        }
        for i in 0..prob.len() {
            if fov.is_some_and(|f| f.data()[i] == 0) {
                continue;
            }
            scores.push(prob.data()[i]);
            labels.push(truth.data()[i] > 0);
        }
    }
    roc(&scores, &labels)
}
