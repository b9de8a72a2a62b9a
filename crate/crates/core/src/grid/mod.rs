//! Dense channel-first grids of `f64` used for images, noise, latents and
//! reward maps.
//!
//! A [`Grid`] is immutable once built. Every constructor rejects non-finite
//! values, so any grid handed out by this crate is finite.

mod io;

pub use io::{read_pgm_bytes, rgb8_bytes, write_pgm, write_ppm, PnmImage};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

impl Grid {
    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let expected = channels
            .checked_mul(height)
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::Dimension("grid size overflows".into()))?;
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "grid dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != expected {
            return Err(Error::Dimension(format!(
                "data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite grid value at offset {pos}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        let len = channels.saturating_mul(height).saturating_mul(width);
        Self::from_vec(channels, height, width, vec![value; len])
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::filled(channels, height, width, 0.0)
    }

    /// Builds a grid from nested rows of a single-channel map.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::from_vec(1, height, width, rows.concat())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    /// Copies one channel out as a 1-channel grid.
    pub fn channel(&self, c: usize) -> Result<Grid> {
        if c >= self.channels {
            return Err(Error::Index(format!(
                "channel {c} of a {}-channel grid",
                self.channels
            )));
        }
        Ok(Grid {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.plane(c).to_vec(),
        })
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.shape() == other.shape()
    }

    fn check_same_shape(&self, other: &Grid) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    /// Applies `f` to every entry. Fails if the result is not finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Grid> {
        Grid::from_vec(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn elementwise(&self, other: &Grid, op: ElementwiseOp) -> Result<Grid> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| match op {
                ElementwiseOp::Add => a + b,
                ElementwiseOp::Sub => a - b,
                ElementwiseOp::Mul => a * b,
            })
            .collect();
        Grid::from_vec(self.channels, self.height, self.width, data)
    }

    pub fn add(&self, other: &Grid) -> Result<Grid> {
        self.elementwise(other, ElementwiseOp::Add)
    }

    pub fn sub(&self, other: &Grid) -> Result<Grid> {
        self.elementwise(other, ElementwiseOp::Sub)
    }

    pub fn mul(&self, other: &Grid) -> Result<Grid> {
        self.elementwise(other, ElementwiseOp::Mul)
    }

    pub fn scale(&self, k: f64) -> Result<Grid> {
        self.map(|v| v * k)
    }

    pub fn reduce(&self, mode: Reduction) -> f64 {
        let sum: f64 = self.data.iter().sum();
        match mode {
            Reduction::Sum => sum,
            Reduction::Mean => sum / self.data.len() as f64,
        }
    }

    pub fn sum(&self) -> f64 {
        self.reduce(Reduction::Sum)
    }

    pub fn mean(&self) -> f64 {
        self.reduce(Reduction::Mean)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Sums channels into a single-channel grid.
    pub fn sum_channels(&self) -> Grid {
        let n = self.plane_len();
        let mut out = vec![0.0; n];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(self.plane(c)) {
                *o += v;
            }
        }
        Grid {
            channels: 1,
            height: self.height,
            width: self.width,
            data: out,
        }
    }

    /// Bilinear resize of a single-channel grid with half-pixel centre
    /// alignment. Every output value is a convex combination of at most four
    /// source texels.
    pub fn resample_bilinear(&self, out_h: usize, out_w: usize) -> Result<Grid> {
        if self.channels != 1 {
            return Err(Error::Dimension(format!(
                "bilinear resampling expects 1 channel, got {}",
                self.channels
            )));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::Dimension(format!(
                "resample target must be non-empty, got {out_h}x{out_w}"
            )));
        }
        if out_h == self.height && out_w == self.width {
            return Ok(self.clone());
        }
        let ys = axis_taps(self.height, out_h);
        let xs = axis_taps(self.width, out_w);
        let mut data = Vec::with_capacity(out_h * out_w);
        for &(y0, y1, fy) in &ys {
            let row0 = &self.data[y0 * self.width..(y0 + 1) * self.width];
            let row1 = &self.data[y1 * self.width..(y1 + 1) * self.width];
            for &(x0, x1, fx) in &xs {
                let top = row0[x0] * (1.0 - fx) + row0[x1] * fx;
                let bottom = row1[x0] * (1.0 - fx) + row1[x1] * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        Grid::from_vec(1, out_h, out_w, data)
    }

    /// Per-channel bilinear resize.
    pub fn resample_channels(&self, out_h: usize, out_w: usize) -> Result<Grid> {
        let mut data = Vec::with_capacity(self.channels * out_h * out_w);
        for c in 0..self.channels {
            data.extend(self.channel(c)?.resample_bilinear(out_h, out_w)?.data);
        }
        Grid::from_vec(self.channels, out_h, out_w, data)
    }
}

/// Source taps `(i0, i1, frac)` for each output coordinate along one axis.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    let last = (src - 1) as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}
