//! Connectivity, area and length agreement of two vessel masks.
//!
//! With `|·|` counting foreground pixels, `δ_r` disc dilation and `φ`
//! Zhang–Suen thinning:
//!
//! * `C = 1 − min(1, |#cc(truth) − #cc(pred)| / |truth|)` over 8-connected
//!   components,
//! * `A = |(δ_α(pred) ∩ truth) ∪ (pred ∩ δ_α(truth))| / |pred ∪ truth|`,
//! * `L = |(φ(pred) ∩ δ_β(truth)) ∪ (δ_β(pred) ∩ φ(truth))| / |φ(pred) ∪ φ(truth)|`,
//! * `F = C·A·L`.

use serde::{Deserialize, Serialize};

use super::morphology::{count_components, dilate_disc, zhang_suen};
use crate::error::Result;
use crate::pipeline::raster::{check_dims, Raster};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalConfig {
    /// Dilation radius of the area term.
    pub alpha: usize,
    /// Dilation radius of the length term.
    pub beta: usize,
}

impl Default for CalConfig {
    fn default() -> Self {
        CalConfig { alpha: 2, beta: 2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalScore {
    pub c: f64,
    pub a: f64,
    pub l: f64,
    pub f: f64,
    /// A term fell back to a convention: both masks empty, or both
    /// skeletons empty (thinning erases blobs such as 2×2 squares).
    pub flagged: bool,
}

fn count(m: &Raster<u8>) -> usize {
    m.data().iter().filter(|&&v| v != 0).count()
}

/// `|(x ∩ y) ∪ (u ∩ v)|` for same-sized masks.
fn union_of_intersections(x: &Raster<u8>, y: &Raster<u8>, u: &Raster<u8>, v: &Raster<u8>) -> usize {
    (0..x.len())
        .filter(|&i| (x.data()[i] != 0 && y.data()[i] != 0) || (u.data()[i] != 0 && v.data()[i] != 0))
        .count()
}

fn union(x: &Raster<u8>, y: &Raster<u8>) -> usize {
    (0..x.len()).filter(|&i| x.data()[i] != 0 || y.data()[i] != 0).count()
}

pub fn cal(pred: &Raster<u8>, truth: &Raster<u8>, cfg: &CalConfig) -> Result<CalScore> {
    check_dims("cal", pred, truth)?;
    let (n_pred, n_truth) = (count(pred), count(truth));
    if n_pred == 0 && n_truth == 0 {
        return Ok(CalScore {
            c: 1.0,
            a: 1.0,
            l: 1.0,
            f: 1.0,
            flagged: true,
        });
    }

    let c = if n_truth == 0 {
        0.0
    } else {
        let diff = count_components(truth).abs_diff(count_components(pred)) as f64;
        1.0 - (diff / n_truth as f64).min(1.0)
    };

    let a = {
        let overlap = union_of_intersections(&dilate_disc(pred, cfg.alpha), truth, pred, &dilate_disc(truth, cfg.alpha));
        overlap as f64 / union(pred, truth) as f64
    };

    let mut flagged = false;
    let l = if n_pred == 0 {
        0.0
    } else {
        let (sp, st) = (zhang_suen(pred), zhang_suen(truth));
        let den = union(&sp, &st);
        if den == 0 {
            flagged = true;
            1.0
        } else {
            let num = union_of_intersections(&sp, &dilate_disc(truth, cfg.beta), &dilate_disc(pred, cfg.beta), &st);
            num as f64 / den as f64
        }
    };

    Ok(CalScore {
        c,
        a,
        l,
        f: c * a * l,
        flagged,
    })
}
