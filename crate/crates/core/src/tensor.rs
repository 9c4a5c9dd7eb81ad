//! Dense `C×H×W` scalar grids.
//!
//! Everything in the crate (latents, noise fields, feature maps, gradients)
//! is stored as a [`Grid`]: channel-major, then row-major, `f64` entries.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    shape: Shape,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                format!("{} values for {shape}", shape.len()),
                data.len(),
            ));
        }
        Ok(Self { shape, data })
    }

    /// Builds a grid by evaluating `f(c, y, x)` at every cell.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { shape, data }
    }

    /// Standard normal entries drawn from `rng` in storage order.
    pub fn randn<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Self {
        let data = (0..shape.len()).map(|_| rng.sample(StandardNormal)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(c < self.shape.channels && y < self.shape.height && x < self.shape.width);
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        let i = self.index(c, y, x);
        self.data[i] = value;
    }

    #[inline]
    pub fn add_at(&mut self, c: usize, y: usize, x: usize, value: f64) {
        let i = self.index(c, y, x);
        self.data[i] += value;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.shape.plane();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let plane = self.shape.plane();
        &mut self.data[c * plane..(c + 1) * plane]
    }

    /// The `D`-vector of channel values at pixel `(y, x)`.
    pub fn pixel(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.shape.channels).map(|c| self.get(c, y, x)).collect()
    }

    pub fn ensure_shape(&self, expected: Shape) -> Result<()> {
        if self.shape != expected {
            return Err(Error::shape(expected, self.shape));
        }
        Ok(())
    }

    pub fn ensure_same_shape(&self, other: &Grid) -> Result<()> {
        other.ensure_shape(self.shape)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        self.ensure_same_shape(other)?;
        Ok(Grid {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Grid {
        self.map(|v| v * s)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Grid) -> Result<()> {
        self.ensure_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// `a * self + b * other`
    pub fn lincomb(&self, a: f64, other: &Grid, b: f64) -> Result<Grid> {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.sum() / self.data.len() as f64
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn dot(&self, other: &Grid) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Grid) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Stacks grids with equal spatial size along the channel axis.
    pub fn stack_channels(parts: &[&Grid]) -> Result<Grid> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidRange("cannot stack zero grids".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut channels = 0;
        let mut data = Vec::new();
        for g in parts {
            if g.height() != h || g.width() != w {
                return Err(Error::shape(format!("_x{h}x{w}"), g.shape()));
            }
            channels += g.channels();
            data.extend_from_slice(&g.data);
        }
        Ok(Grid {
            shape: Shape::new(channels, h, w),
            data,
        })
    }
}
