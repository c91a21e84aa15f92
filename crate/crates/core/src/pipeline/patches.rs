//! Random training patches with right-angle rotation augmentation.

use rand::Rng;

use super::raster::{check_dims, Raster};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub image: Raster<f64>,
    pub truth: Raster<u8>,
    /// Top-left corner in the source image.
    pub origin: (usize, usize),
    /// Counter-clockwise quarter turns applied to both rasters.
    pub rotation: u8,
}

/// Where a patch is cut and how it is turned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    pub origin: (usize, usize),
    pub rotation: u8,
}

impl PatchSpec {
    /// Cuts the patch from an image and its truth.
    pub fn cut(&self, image: &Raster<f64>, truth: &Raster<u8>, patch: usize) -> Result<PatchPair> {
        let (r, c) = self.origin;
        Ok(PatchPair {
            image: image.crop(r, c, patch, patch)?.rotate90(self.rotation),
            truth: truth.crop(r, c, patch, patch)?.rotate90(self.rotation),
            origin: self.origin,
            rotation: self.rotation,
        })
    }
}

/// Draws `n` uniform random in-bounds origins of square patches in an
/// `h×w` image, each with a uniform random multiple of 90°.
pub fn sample_specs<R: Rng + ?Sized>(h: usize, w: usize, n: usize, patch: usize, rng: &mut R) -> Result<Vec<PatchSpec>> {
    if patch == 0 || patch > h.min(w) {
        return Err(Error::invalid(
            "sample_patches",
            format!("patch {patch} does not fit a {h}×{w} image"),
        ));
    }
    Ok((0..n)
        .map(|_| {
            let r = rng.gen_range(0..=h - patch);
            let c = rng.gen_range(0..=w - patch);
            PatchSpec {
                origin: (r, c),
                rotation: rng.gen_range(0..4u8),
            }
        })
        .collect())
}

/// Draws `n` square patches at uniform random in-bounds origins. Image and
/// truth are cropped at the same origin and rotated by the same uniform
/// random multiple of 90°.
pub fn sample_patches<R: Rng + ?Sized>(
    image: &Raster<f64>,
    truth: &Raster<u8>,
    n: usize,
    patch: usize,
    rng: &mut R,
) -> Result<Vec<PatchPair>> {
    check_dims("sample_patches", image, truth)?;
    let (h, w) = image.dims();
    sample_specs(h, w, n, patch, rng)?
        .iter()
        .map(|s| s.cut(image, truth, patch))
        .collect()
}
