//! Dense `(channels, height, width)` tensors in 64-bit precision.
//!
//! [`Tensor3`] is the compute type used inside the networks, losses and
//! gradients. The split-point interface type is the 32-bit
//! [`FeatureTensor`](crate::feature::FeatureTensor); conversions between
//! the two are lossless in the f32 -> f64 direction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a `(c, h, w)` tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of spatial positions (tokens).
    pub const fn tokens(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub const fn index(&self, c: usize, h: usize, w: usize) -> usize {
        (c * self.height + h) * self.width + w
    }

    pub fn with_channels(&self, channels: usize) -> Self {
        Self { channels, ..*self }
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Row-major `(c, h, w)` tensor of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    shape: Shape3,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(shape: Shape3) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape3, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shapes(shape, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for h in 0..shape.height {
                for w in 0..shape.width {
                    data.push(f(c, h, w));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.index(c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, h: usize, w: usize, v: f64) {
        let i = self.shape.index(c, h, w);
        self.data[i] = v;
    }

    /// Contiguous slice of one channel plane.
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.shape.tokens();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.shape.tokens();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Channel vector at spatial position `(h, w)`.
    pub fn column(&self, h: usize, w: usize) -> Vec<f64> {
        (0..self.shape.channels).map(|c| self.get(c, h, w)).collect()
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_shape(other)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|v| alpha * v)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.ensure_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape3(self.shape, other.shape));
        }
        Ok(())
    }
}

/// Sum of squares across a list of tensors (pyramid levels).
pub fn levels_sum_squares(levels: &[Tensor3]) -> f64 {
    levels.iter().map(Tensor3::sum_squares).sum()
}

/// Level-wise `a + alpha * b`.
pub fn levels_axpy(a: &[Tensor3], alpha: f64, b: &[Tensor3]) -> Result<Vec<Tensor3>> {
    if a.len() != b.len() {
        return Err(Error::shapes(a.len(), b.len()));
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| x.zip_map(y, |u, v| u + alpha * v))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_major_indexing() {
        let s = Shape3::new(2, 3, 4);
        let t = Tensor3::from_fn(s, |c, h, w| (c * 100 + h * 10 + w) as f64);
        assert_eq!(t.data()[s.index(1, 2, 3)], 123.0);
        assert_eq!(t.data()[1], 1.0);
        assert_eq!(t.plane(1)[0], 100.0);
        assert_eq!(t.column(2, 1), vec![21.0, 121.0]);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let a = Tensor3::zeros(Shape3::new(1, 2, 2));
        let b = Tensor3::zeros(Shape3::new(2, 1, 2));
        assert!(matches!(a.add(&b), Err(Error::ShapeMismatch { .. })));
    }
}
