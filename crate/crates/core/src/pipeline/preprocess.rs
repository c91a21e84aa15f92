//! Fundus preprocessing: grayscale, per-image normalisation, CLAHE and gamma.

use serde::{Deserialize, Serialize};

use super::io::Image8;
use super::raster::Raster;
use crate::error::{Error, Result};

pub const CLAHE_BINS: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub clahe: bool,
    /// Tiles per side of the CLAHE grid.
    pub clahe_tiles: usize,
    /// Histogram clip limit as a multiple of the uniform bin height.
    pub clahe_clip: f64,
    pub gamma: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            clahe: true,
            clahe_tiles: 8,
            clahe_clip: 2.0,
            gamma: 1.2,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clahe_tiles == 0 {
            return Err(Error::Config("clahe_tiles must be ≥ 1".into()));
        }
        if !(self.clahe_clip > 0.0 && self.clahe_clip.is_finite()) {
            return Err(Error::Config(format!("clahe_clip must be positive, got {}", self.clahe_clip)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Luma `0.299R + 0.587G + 0.114B` on the 0–255 scale.
pub fn grayscale(image: &Image8) -> Raster<f64> {
    match image {
        Image8::Gray(r) => r.map(f64::from),
        Image8::Rgb(r) => r.map(|[red, green, blue]| {
            0.299 * f64::from(red) + 0.587 * f64::from(green) + 0.114 * f64::from(blue)
        }),
    }
}

/// Standardises to zero mean and unit variance, then rescales the result
/// to `[0, 1]` by min-max. `None` when the image is constant.
pub fn normalize(gray: &Raster<f64>) -> Option<Raster<f64>> {
    let n = gray.len() as f64;
    let mean = gray.data().iter().sum::<f64>() / n;
    let var = gray.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        return None;
    }
    let sd = var.sqrt();
    let z = gray.map(|v| (v - mean) / sd);
    let lo = z.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = z.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return None;
    }
    Some(z.map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)))
}

fn quantize(v: f64) -> usize {
    ((v.clamp(0.0, 1.0) * (CLAHE_BINS - 1) as f64).round() as usize).min(CLAHE_BINS - 1)
}

/// Clipped-histogram equalisation lookup of one tile: `lut[q]` is the
/// clipped cumulative frequency of bins `0..=q`, in `(0, 1]`.
pub fn clipped_lut(levels: impl IntoIterator<Item = usize>, clip: f64) -> Vec<f64> {
    let mut hist = vec![0.0; CLAHE_BINS];
    let mut area = 0.0;
    for q in levels {
        hist[q] += 1.0;
        area += 1.0;
    }
    let limit = (clip * area / CLAHE_BINS as f64).max(1.0);
    let mut excess = 0.0;
    for h in &mut hist {
        if *h > limit {
            excess += *h - limit;
            *h = limit;
        }
    }
    let bonus = excess / CLAHE_BINS as f64;
    let mut acc = 0.0;
    hist.iter()
        .map(|h| {
            acc += h + bonus;
            acc / area
        })
        .collect()
}

/// Start offsets of `tiles` near-equal spans covering `0..len`.
fn spans(len: usize, tiles: usize) -> Vec<(usize, usize)> {
    (0..tiles).map(|t| (t * len / tiles, (t + 1) * len / tiles)).collect()
}

/// For each coordinate, the two neighbouring tile indices and the blend
/// weight of the second, from linear interpolation between tile centres.
fn blend_weights(len: usize, spans: &[(usize, usize)]) -> Vec<(usize, usize, f64)> {
    let centres: Vec<f64> = spans.iter().map(|&(a, b)| (a + b - 1) as f64 / 2.0).collect();
    (0..len)
        .map(|p| {
            let p = p as f64;
            let next = centres.iter().position(|&c| c > p);
            match next {
                Some(0) => (0, 0, 0.0),
                None => (centres.len() - 1, centres.len() - 1, 0.0),
                Some(i) => {
                    let (c0, c1) = (centres[i - 1], centres[i]);
                    (i - 1, i, (p - c0) / (c1 - c0))
                }
            }
        })
        .collect()
}

/// Contrast-limited adaptive histogram equalisation of a `[0, 1]` image on
/// its 256-level quantisation. Tile lookups are blended bilinearly between
/// tile centres.
pub fn clahe(image: &Raster<f64>, tiles: usize, clip: f64) -> Raster<f64> {
    let (h, w) = image.dims();
    let (ty, tx) = (tiles.clamp(1, h), tiles.clamp(1, w));
    let (rows, cols) = (spans(h, ty), spans(w, tx));
    let q = image.map(quantize);

    let mut luts = Vec::with_capacity(ty * tx);
    for &(r0, r1) in &rows {
        for &(c0, c1) in &cols {
            let levels = (r0..r1).flat_map(|r| (c0..c1).map(move |c| (r, c))).map(|(r, c)| q.get(r, c));
            luts.push(clipped_lut(levels, clip));
        }
    }

    let (wy, wx) = (blend_weights(h, &rows), blend_weights(w, &cols));
    Raster::from_fn(h, w, |r, c| {
        let v = q.get(r, c);
        let (i0, i1, fy) = wy[r];
        let (j0, j1, fx) = wx[c];
        let at = |i: usize, j: usize| luts[i * tx + j][v];
        let top = (1.0 - fx) * at(i0, j0) + fx * at(i0, j1);
        let bottom = (1.0 - fx) * at(i1, j0) + fx * at(i1, j1);
        ((1.0 - fy) * top + fy * bottom).clamp(0.0, 1.0)
    })
}

pub fn gamma(image: &Raster<f64>, gamma: f64) -> Raster<f64> {
    image.map(|v| v.clamp(0.0, 1.0).powf(gamma))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessed {
    pub image: Raster<f64>,
    /// The input was constant, so normalisation and CLAHE were skipped.
    pub degenerate: bool,
}

/// The full chain, producing values in `[0, 1]`. A constant image is
/// replaced by a 0.5-filled raster (then gamma-mapped) with a warning.
pub fn preprocess(image: &Image8, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    cfg.validate()?;
    let gray = grayscale(image);
    let (normalized, degenerate) = match normalize(&gray) {
        Some(n) => (n, false),
        None => {
            log::warn!("constant image: normalisation undefined, using a 0.5-filled raster");
            (Raster::filled(gray.height(), gray.width(), 0.5), true)
        }
    };
    let equalized = if cfg.clahe && !degenerate {
        clahe(&normalized, cfg.clahe_tiles, cfg.clahe_clip)
    } else {
        normalized
    };
    Ok(Preprocessed {
        image: gamma(&equalized, cfg.gamma),
        degenerate,
    })
}
