//! Dense 4-D tensors and per-pixel label maps.
//!
//! A [`Tensor`] is an immutable `(n, c, h, w)` array of `f32`, row-major with
//! `w` fastest. Storage is behind an `Arc`, so cloning a tensor is cheap and
//! every op returns a fresh value. Mutation happens only by constructing a
//! new tensor.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Shape of a 4-D tensor: batch, channels, height, width.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat index of `(n, c, y, x)`; `w` is the fastest-moving axis.
    #[inline(always)]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self)
    }
}

impl From<(usize, usize, usize, usize)> for Shape {
    fn from(t: (usize, usize, usize, usize)) -> Self {
        Shape::new(t.0, t.1, t.2, t.3)
    }
}

/// Immutable dense 4-D array of 32-bit floats.
#[derive(Clone)]
pub struct Tensor {
    shape: Shape,
    data: Arc<Vec<f32>>,
}

impl Tensor {
    /// Build a tensor from a flat buffer. The buffer length must equal
    /// `shape.numel()`.
    pub fn from_vec(shape: impl Into<Shape>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "tensor",
                format!("data length {} != numel {} for shape {}", data.len(), shape.numel(), shape),
            ));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        let shape = shape.into();
        Tensor { shape, data: Arc::new(vec![0.0; shape.numel()]) }
    }

    pub fn full(shape: impl Into<Shape>, value: f32) -> Self {
        let shape = shape.into();
        Tensor { shape, data: Arc::new(vec![value; shape.numel()]) }
    }

    /// Scalar tensor of shape (1, 1, 1, 1).
    pub fn scalar(value: f32) -> Self {
        Tensor::full((1, 1, 1, 1), value)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Value at `(n, c, y, x)`.
    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.shape.idx(n, c, y, x)]
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Copy of the flat buffer, for building a modified tensor.
    pub fn to_vec(&self) -> Vec<f32> {
        self.data.as_ref().clone()
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        let data: Vec<f32> = self.data.iter().map(|&v| f(v)).collect();
        Tensor { shape: self.shape, data: Arc::new(data) }
    }

    /// True if every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Maximum absolute element, 0 for empty tensors.
    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Bitwise equality of shape and every element.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}

/// Integer label map for one image: values in `[0, K)` plus the ignore label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape(
                "label_map",
                format!("data length {} != {}x{}", data.len(), h, w),
            ));
        }
        Ok(LabelMap { h, w, data })
    }

    pub fn filled(h: usize, w: usize, value: u8) -> Self {
        LabelMap { h, w, data: vec![value; h * w] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    /// Count of each label value present.
    pub fn histogram(&self) -> std::collections::BTreeMap<u8, usize> {
        let mut hist = std::collections::BTreeMap::new();
        for &v in &self.data {
            *hist.entry(v).or_insert(0) += 1;
        }
        hist
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_is_row_major_w_fastest() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.idx(0, 0, 0, 0), 0);
        assert_eq!(s.idx(0, 0, 0, 1), 1);
        assert_eq!(s.idx(0, 0, 1, 0), 5);
        assert_eq!(s.idx(0, 1, 0, 0), 20);
        assert_eq!(s.idx(1, 0, 0, 0), 60);
        assert_eq!(s.idx(1, 2, 3, 4), 119);
        assert_eq!(s.numel(), 120);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        let err = Tensor::from_vec((1, 1, 2, 2), vec![0.0; 3]);
        assert!(err.is_err());
    }

    #[test]
    fn clone_is_shallow_and_immutable() {
        let t = Tensor::from_vec((1, 1, 1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let u = t.clone();
        assert!(std::ptr::eq(t.data(), u.data()));
        let v = t.map(|x| x * 2.0);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0]);
        assert_eq!(v.data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn label_map_roundtrip() {
        let mut m = LabelMap::filled(2, 3, 0);
        m.set(1, 2, 7);
        assert_eq!(m.at(1, 2), 7);
        assert_eq!(m.histogram()[&0], 5);
        assert_eq!(m.histogram()[&7], 1);
    }
}
