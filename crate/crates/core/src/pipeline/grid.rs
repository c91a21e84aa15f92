//! Overlapping patch grids for full-image inference.
//!
//! The image is reflect-padded at the bottom and right to the least size
//! whose excess over the patch is a multiple of the stride, tiled with
//! patches at every stride step, and reassembled by averaging overlapping
//! predictions before cropping the padding away.

use super::raster::Raster;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch: usize,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub padded_h: usize,
    pub padded_w: usize,
    /// Row offsets `0, stride, …, padded_h − patch`.
    pub rows: Vec<usize>,
    /// Column offsets `0, stride, …, padded_w − patch`.
    pub cols: Vec<usize>,
}

fn padded_extent(len: usize, patch: usize, stride: usize) -> usize {
    let size = len.max(patch);
    match (size - patch) % stride {
        0 => size,
        rem => size + stride - rem,
    }
}

/// Plans a grid over an `h×w` image.
pub fn plan_grid(h: usize, w: usize, patch: usize, stride: usize) -> Result<PatchGrid> {
    if h == 0 || w == 0 {
        return Err(Error::invalid("plan_grid", format!("empty image {h}×{w}")));
    }
    if stride == 0 || stride > patch {
        return Err(Error::invalid(
            "plan_grid",
            format!("need 1 ≤ stride ≤ patch, got stride {stride}, patch {patch}"),
        ));
    }
    let (padded_h, padded_w) = (padded_extent(h, patch, stride), padded_extent(w, patch, stride));
    Ok(PatchGrid {
        patch,
        stride,
        height: h,
        width: w,
        padded_h,
        padded_w,
        rows: (0..=padded_h - patch).step_by(stride).collect(),
        cols: (0..=padded_w - patch).step_by(stride).collect(),
    })
}

impl PatchGrid {
    /// Patch origins in row-major order.
    pub fn origins(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows.iter().flat_map(move |&r| self.cols.iter().map(move |&c| (r, c)))
    }

    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of patches covering each padded pixel.
    pub fn coverage(&self) -> Raster<u32> {
        let mut count = Raster::filled(self.padded_h, self.padded_w, 0u32);
        for (r, c) in self.origins() {
            for y in r..r + self.patch {
                for x in c..c + self.patch {
                    count.set(y, x, count.get(y, x) + 1);
                }
            }
        }
        count
    }

    /// Reflect-pads `image` and cuts every patch of the grid.
    pub fn extract<T: Copy>(&self, image: &Raster<T>) -> Result<Vec<Raster<T>>> {
        if image.dims() != (self.height, self.width) {
            return Err(Error::shape("extract", &[image.height(), image.width()], &[self.height, self.width]));
        }
        let padded = pad_reflect(image, self.padded_h, self.padded_w);
        self.origins()
            .map(|(r, c)| padded.crop(r, c, self.patch, self.patch))
            .collect()
    }
}

/// Mirror index without repeating the edge sample (`…, 2, 1, 0, 1, 2, …`),
/// applied repeatedly when the pad exceeds the source length.
fn reflect(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len {
        m
    } else {
        period - m
    }
}

/// Extends `image` to `ph×pw` by reflection at the bottom and right edges.
pub fn pad_reflect<T: Copy>(image: &Raster<T>, ph: usize, pw: usize) -> Raster<T> {
    let (h, w) = image.dims();
    Raster::from_fn(ph.max(h), pw.max(w), |r, c| image.get(reflect(r, h), reflect(c, w)))
}

/// Averages patch predictions back onto the grid's canvas and crops the
/// padding. Sums and counts are accumulated in patch order.
pub fn stitch(patches: &[Raster<f64>], grid: &PatchGrid) -> Result<Raster<f64>> {
    if patches.len() != grid.len() {
        return Err(Error::invalid(
            "stitch",
            format!("{} patches for a grid of {}", patches.len(), grid.len()),
        ));
    }
    let mut sum = Raster::filled(grid.padded_h, grid.padded_w, 0.0);
    let mut count = Raster::filled(grid.padded_h, grid.padded_w, 0u32);
    for (p, (r, c)) in patches.iter().zip(grid.origins()) {
        if p.dims() != (grid.patch, grid.patch) {
            return Err(Error::shape("stitch", &[p.height(), p.width()], &[grid.patch, grid.patch]));
        }
        for y in 0..grid.patch {
            for x in 0..grid.patch {
                sum.set(r + y, c + x, sum.get(r + y, c + x) + p.get(y, x));
                count.set(r + y, c + x, count.get(r + y, c + x) + 1);
            }
        }
    }
    Ok(Raster::from_fn(grid.height, grid.width, |r, c| {
        sum.get(r, c) / f64::from(count.get(r, c))
    }))
}

/// Pixels `≥ threshold` become 1.
pub fn binarize(prob: &Raster<f64>, threshold: f64) -> Raster<u8> {
    prob.map(|p| u8::from(p >= threshold))
}
