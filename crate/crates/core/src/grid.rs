//! Dense multi-channel 2D latent grids and the resampling kernels used by the
//! pyramid.
//!
//! Layout is row-major with the channel index innermost, so the value at
//! `(row, col, ch)` lives at `(row * width + col) * channels + ch`.
//!
//! `down` is block averaging and `up` is nearest-neighbour replication, which
//! makes `down(up(g, f), f) == g` exactly.

use std::io::{Read, Write};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::rng::RngStream;

/// Magic bytes of the binary grid file.
pub const GRID_MAGIC: &[u8; 4] = b"PYRG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Shape after dividing both spatial dims by `factor`.
    pub fn reduced(&self, factor: usize) -> Result<Shape> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return dim_err(format!(
                "{}x{} is not divisible by {factor}",
                self.height, self.width
            ));
        }
        Ok(Shape::new(
            self.height / factor,
            self.width / factor,
            self.channels,
        ))
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return dim_err(format!(
                "grid dims must be positive, got {}x{}x{}",
                self.height, self.width, self.channels
            ));
        }
        Ok(())
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// A dense `height × width × channels` grid of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    shape: Shape,
    data: Vec<f64>,
}

fn check_power_of_two(factor: usize) -> Result<()> {
    if factor == 0 || !factor.is_power_of_two() {
        return arg_err(format!("resampling factor {factor} is not a power of two"));
    }
    Ok(())
}

impl LatentGrid {
    /// Builds a grid, validating dims, length and finiteness.
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return dim_err(format!(
                "grid {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!(
                "non-finite value {} at index {i}",
                data[i]
            )));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for values already known to be consistent.
    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        Self { shape, data }
    }

    pub fn filled(shape: Shape, value: f64) -> Result<Self> {
        Self::new(shape, vec![value; shape.len()])
    }

    pub fn zeros(shape: Shape) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.len());
        for r in 0..shape.height {
            for c in 0..shape.width {
                for ch in 0..shape.channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self::new(shape, data)
    }

    /// I.i.d. standard normal grid addressed by `(seed, stream)`.
    pub fn gaussian(shape: Shape, seed: u64, stream: u64) -> Result<Self> {
        let mut rng = RngStream::new(seed, stream);
        Self::gaussian_from(shape, &mut rng)
    }

    /// I.i.d. standard normal grid drawn from an existing stream.
    pub fn gaussian_from(shape: Shape, rng: &mut RngStream) -> Result<Self> {
        shape.validate()?;
        let mut data = vec![0.0; shape.len()];
        rng.fill_normal(&mut data);
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.shape.width + col) * self.shape.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Block-mean downsampling by a power-of-two `factor`.
    pub fn down(&self, factor: usize) -> Result<LatentGrid> {
        check_power_of_two(factor)?;
        let out_shape = self.shape.reduced(factor)?;
        if factor == 1 {
            return Ok(self.clone());
        }
        let ch = self.shape.channels;
        let inv = 1.0 / (factor * factor) as f64;
        let mut out = vec![0.0; out_shape.len()];
        for r in 0..out_shape.height {
            for c in 0..out_shape.width {
                let dst = (r * out_shape.width + c) * ch;
                for dr in 0..factor {
                    for dc in 0..factor {
                        let src = self.index(r * factor + dr, c * factor + dc, 0);
                        for k in 0..ch {
                            out[dst + k] += self.data[src + k];
                        }
                    }
                }
                for k in 0..ch {
                    out[dst + k] *= inv;
                }
            }
        }
        Ok(Self::from_parts(out_shape, out))
    }

    /// Nearest-neighbour upsampling by a power-of-two `factor`.
    pub fn up(&self, factor: usize) -> Result<LatentGrid> {
        check_power_of_two(factor)?;
        let (h, w) = match (
            self.shape.height.checked_mul(factor),
            self.shape.width.checked_mul(factor),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => return dim_err(format!("upsampling {} by {factor} overflows", self.shape)),
        };
        let out_shape = Shape::new(h, w, self.shape.channels);
        if out_shape
            .height
            .checked_mul(out_shape.width)
            .and_then(|p| p.checked_mul(out_shape.channels))
            .is_none()
        {
            return dim_err(format!("upsampling {} by {factor} overflows", self.shape));
        }
        let ch = self.shape.channels;
        let mut out = Vec::with_capacity(out_shape.len());
        for r in 0..h {
            let sr = r / factor;
            for c in 0..w {
                let src = self.index(sr, c / factor, 0);
                out.extend_from_slice(&self.data[src..src + ch]);
            }
        }
        Ok(Self::from_parts(out_shape, out))
    }

    /// Elementwise `(1 - w) * a + w * b`.
    pub fn lerp(a: &LatentGrid, b: &LatentGrid, w: f64) -> Result<LatentGrid> {
        if !(0.0..=1.0).contains(&w) {
            return arg_err(format!("interpolation weight {w} outside [0, 1]"));
        }
        if w == 0.0 {
            a.same_shape(b)?;
            return Ok(a.clone());
        }
        if w == 1.0 {
            a.same_shape(b)?;
            return Ok(b.clone());
        }
        a.zip_map(b, |x, y| (1.0 - w) * x + w * y)
    }

    pub fn same_shape(&self, other: &LatentGrid) -> Result<()> {
        if self.shape != other.shape {
            return dim_err(format!("shape mismatch: {} vs {}", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentGrid {
        Self::from_parts(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &LatentGrid, f: impl Fn(f64, f64) -> f64) -> Result<LatentGrid> {
        self.same_shape(other)?;
        Ok(Self::from_parts(
            self.shape,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    /// `alpha * a + beta * b`.
    pub fn combine(alpha: f64, a: &LatentGrid, beta: f64, b: &LatentGrid) -> Result<LatentGrid> {
        a.zip_map(b, |x, y| alpha * x + beta * y)
    }

    pub fn add(&self, other: &LatentGrid) -> Result<LatentGrid> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &LatentGrid) -> Result<LatentGrid> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> LatentGrid {
        self.map(|v| v * s)
    }

    /// In-place `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &LatentGrid) -> Result<()> {
        self.same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &LatentGrid) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Serialize in the `PYRG` binary format.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(GRID_MAGIC)?;
        for d in [self.shape.height, self.shape.width, self.shape.channels] {
            let d = u32::try_from(d)
                .map_err(|_| Error::Dimension(format!("dim {d} does not fit in u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.data.len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Parse a `PYRG` binary grid.
    pub fn read_from(mut r: impl Read) -> Result<LatentGrid> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != GRID_MAGIC {
            return Err(Error::Format(format!("bad grid magic {magic:?}")));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2]);
        shape.validate()?;
        let mut data = Vec::with_capacity(shape.len());
        let mut b = [0u8; 8];
        for _ in 0..shape.len() {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after grid data".into()));
        }
        LatentGrid::new(shape, data)
    }
}
