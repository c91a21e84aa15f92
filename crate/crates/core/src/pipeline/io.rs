//! Raster file I/O.
//!
//! Images and masks are read from PNG or binary PGM/PPM. Probability maps
//! are written as 16-bit PGM with `value = round(p·65535)`, binary masks as
//! 8-bit PNG with vessels at 255. Every write goes to a temporary file that
//! is renamed into place.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat, ImageReader};

use super::raster::Raster;
use crate::error::{Error, Result};

/// An 8-bit image as read from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum Image8 {
    Gray(Raster<u8>),
    Rgb(Raster<[u8; 3]>),
}

impl Image8 {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            Image8::Gray(r) => r.dims(),
            Image8::Rgb(r) => r.dims(),
        }
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let image_err = |source| Error::Image {
        path: path.to_path_buf(),
        source,
    };
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(image_err)
}

fn to_raster<T: Copy>(path: &Path, w: u32, h: u32, data: Vec<T>) -> Result<Raster<T>> {
    Raster::new(h as usize, w as usize, data).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Reads an 8-bit grayscale or RGB image. Other pixel formats are converted.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image8> {
    let path = path.as_ref();
    let img = decode(path)?;
    let (w, h) = (img.width(), img.height());
    if img.color().has_color() {
        let px = img.to_rgb8().pixels().map(|p| p.0).collect();
        Ok(Image8::Rgb(to_raster(path, w, h, px)?))
    } else {
        Ok(Image8::Gray(to_raster(path, w, h, img.to_luma8().into_raw())?))
    }
}

/// Reads a binary mask: luma `≥ 128` becomes 1, everything else 0.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Raster<u8>> {
    let path = path.as_ref();
    let img = decode(path)?;
    let (w, h) = (img.width(), img.height());
    let px = img.to_luma8().into_raw().into_iter().map(|v| u8::from(v >= 128)).collect();
    to_raster(path, w, h, px)
}

/// Reads a 16-bit PGM probability map back into `[0, 1]`.
pub fn read_probability_pgm(path: impl AsRef<Path>) -> Result<Raster<f64>> {
    let path = path.as_ref();
    let img = decode(path)?;
    let (w, h) = (img.width(), img.height());
    let px = img.to_luma16().into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect();
    to_raster(path, w, h, px)
}

/// Writes `bytes` to a temporary sibling of `path`, then renames it into place.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let name = path.file_name().ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        msg: "not a file path".into(),
    })?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp: PathBuf = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Encodes values in `[0, 1]` as a binary 16-bit PGM (big-endian samples).
pub fn encode_pgm16(raster: &Raster<f64>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", raster.width(), raster.height()).into_bytes();
    out.reserve(2 * raster.len());
    for &p in raster.data() {
        let v = (p.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn write_pgm16(path: impl AsRef<Path>, raster: &Raster<f64>) -> Result<()> {
    write_atomic(path, &encode_pgm16(raster))
}

/// Writes an 8-bit grayscale PNG.
pub fn write_png_gray(path: impl AsRef<Path>, raster: &Raster<u8>) -> Result<()> {
    let path = path.as_ref();
    let img = GrayImage::from_raw(raster.width() as u32, raster.height() as u32, raster.data().to_vec())
        .expect("raster length matches its dimensions");
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    write_atomic(path, buf.get_ref())
}

/// Writes a `{0,1}` mask as a `{0,255}` PNG.
pub fn write_mask_png(path: impl AsRef<Path>, mask: &Raster<u8>) -> Result<()> {
    write_png_gray(path, &mask.map(|v| if v > 0 { 255 } else { 0 }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.pgm");
        let r = Raster::new(2, 3, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.123]).unwrap();
        write_pgm16(&path, &r).unwrap();
        let back = read_probability_pgm(&path).unwrap();
        assert_eq!(back.dims(), (2, 3));
        for (a, b) in r.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n65535\n"));
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let m = Raster::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        write_mask_png(&path, &m).unwrap();
        assert_eq!(read_mask(&path).unwrap(), m);
        assert_eq!(read_image(&path).unwrap(), Image8::Gray(m.map(|v| v * 255)));
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_image("/nonexistent/x.png").unwrap_err().to_string();
        assert!(err.contains("/nonexistent/x.png"), "{err}");
    }
}
