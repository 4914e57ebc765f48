//! Dense row-major 2-D grids of `f64`, the common currency between heatmaps,
//! attention maps, and class activation maps.

use alloc::vec;
use alloc::vec::Vec;

/// A dense `h x w` grid stored row-major.
///
/// Both dimensions are always at least 1; every constructor checks this so
/// downstream math never has to reason about empty grids.
#[derive(Debug, Clone, PartialEq)]
pub struct Map2 {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Map2 {
    /// Grid of zeros.
    pub fn zeros(h: usize, w: usize) -> Self {
        Self::filled(h, w, 0.0)
    }

    /// Grid with every cell set to `value`.
    pub fn filled(h: usize, w: usize, value: f64) -> Self {
        assert!(h > 0 && w > 0, "Map2 dimensions must be nonzero");
        Self { h, w, data: vec![value; h * w] }
    }

    /// Wraps an existing row-major buffer.
    ///
    /// Panics if `data.len() != h * w` or either dimension is zero; callers
    /// own shape bookkeeping.
    pub fn from_vec(h: usize, w: usize, data: Vec<f64>) -> Self {
        assert!(h > 0 && w > 0, "Map2 dimensions must be nonzero");
        assert_eq!(data.len(), h * w, "Map2 buffer length must equal h * w");
        Self { h, w, data }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    /// `(h, w)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: f64) {
        self.data[y * self.w + x] = value;
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

    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.w..(y + 1) * self.w]
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Elementwise dot product. Shapes must match.
    pub fn dot(&self, other: &Map2) -> f64 {
        assert_eq!(self.shape(), other.shape(), "Map2 dot: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Euclidean (Frobenius) norm.
    pub fn norm2(&self) -> f64 {
        crate::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    /// Applies `f` to every cell in place.
    pub fn map_inplace(&mut self, mut f: impl FnMut(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    /// Min-max normalization onto `[0, 1]`.
    ///
    /// A constant map (including all-zero) has no contrast to preserve and
    /// normalizes to all zeros rather than dividing by zero.
    pub fn minmax_normalized(&self) -> Map2 {
        let min = self.min();
        let max = self.max();
        let range = max - min;
        let mut out = self.clone();
        if range > 0.0 {
            for v in &mut out.data {
                *v = (*v - min) / range;
            }
        } else {
            for v in &mut out.data {
                *v = 0.0;
            }
        }
        out
    }
}
