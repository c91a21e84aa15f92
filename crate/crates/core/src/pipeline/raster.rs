use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A row-major single-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Raster<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("raster", format!("empty raster {height}×{width}")));
        }
        if data.len() != height * width {
            return Err(Error::invalid(
                "raster",
                format!("{height}×{width} raster needs {} values, got {}", height * width, data.len()),
            ));
        }
        Ok(Raster { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        assert!(height > 0 && width > 0, "empty raster");
        Raster {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(height > 0 && width > 0, "empty raster");
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Raster { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: T) {
        self.data[r * self.width + c] = value;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Raster<U> {
        Raster {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// The `h×w` window whose top-left corner is `(r, c)`.
    pub fn crop(&self, r: usize, c: usize, h: usize, w: usize) -> Result<Raster<T>> {
        if h == 0 || w == 0 || r + h > self.height || c + w > self.width {
            return Err(Error::invalid(
                "crop",
                format!("window {h}×{w} at ({r},{c}) outside {}×{}", self.height, self.width),
            ));
        }
        Ok(Raster::from_fn(h, w, |y, x| self.get(r + y, c + x)))
    }

    /// Rotates counter-clockwise by `quarter_turns × 90°`.
    pub fn rotate90(&self, quarter_turns: u8) -> Raster<T> {
        let (h, w) = (self.height, self.width);
        match quarter_turns % 4 {
            0 => self.clone(),
            1 => Raster::from_fn(w, h, |r, c| self.get(c, w - 1 - r)),
            2 => Raster::from_fn(h, w, |r, c| self.get(h - 1 - r, w - 1 - c)),
            _ => Raster::from_fn(w, h, |r, c| self.get(h - 1 - c, r)),
        }
    }

    pub fn same_dims<U>(&self, other: &Raster<U>) -> bool {
        self.height == other.height && self.width == other.width
    }
}

impl Raster<f64> {
    /// Views the raster as a `1×1×H×W` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, 1, self.height, self.width], self.data.clone()).expect("raster extents are positive")
    }
}

/// Errors unless two rasters share dimensions.
pub(crate) fn check_dims<A, B>(op: &'static str, a: &Raster<A>, b: &Raster<B>) -> Result<()>
where
    A: Copy,
    B: Copy,
{
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(Error::shape(op, &[a.height, a.width], &[b.height, b.width]))
    }
}
