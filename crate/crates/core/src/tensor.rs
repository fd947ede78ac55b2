//! Dense NCHW tensors.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::real::Real;

/// Batch × channels × height × width.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements in one batch item.
    pub const fn item(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn with_channels(self, c: usize) -> Self {
        Self { c, ..self }
    }

    pub const fn with_spatial(self, h: usize, w: usize) -> Self {
        Self { h, w, ..self }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("shape", &self.shape).field("len", &self.data.len()).finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::ZERO)
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self { shape, data: vec![value; shape.len()] }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                context: "tensor construction",
                expected: shape,
                found: Shape::new(1, 1, 1, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Shape::scalar(), data: vec![value] }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> T) -> Self {
        Self { shape, data: (0..shape.len()).map(&mut f).collect() }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterpret with a shape of equal element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.len() != self.data.len() {
            return Err(Error::ShapeMismatch { context: "reshape", expected: shape, found: self.shape });
        }
        Ok(Self { shape, data: self.data })
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let s = self.shape;
        self.data[((n * s.c + c) * s.h + y) * s.w + x]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let s = self.shape;
        self.data[((n * s.c + c) * s.h + y) * s.w + x] = v;
    }

    /// One H×W plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let off = (n * self.shape.c + c) * p;
        &self.data[off..off + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let off = (n * self.shape.c + c) * p;
        &mut self.data[off..off + p]
    }

    /// All channels of one batch item.
    pub fn item(&self, n: usize) -> &[T] {
        let s = self.shape.item();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let s = self.shape.item();
        &mut self.data[n * s..(n + 1) * s]
    }

    /// Copy of batch item `n` as a batch of one.
    pub fn select_item(&self, n: usize) -> Self {
        Self { shape: Shape { n: 1, ..self.shape }, data: self.item(n).to_vec() }
    }

    /// Stack batch-of-one tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or(Error::Empty("stack"))?.shape;
        let mut data = Vec::with_capacity(first.item() * items.len());
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(Error::ShapeMismatch { context: "stack", expected: first, found: s });
            }
            data.extend_from_slice(&t.data);
            n += s.n;
        }
        Ok(Self { shape: Shape { n, ..first }, data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect() }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a.to_f64() - b.to_f64()).abs()).fold(0.0, f64::max)
    }

    /// Horizontal mirror of every plane.
    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        let w = self.shape.w;
        for row in out.data.chunks_mut(w) {
            row.reverse();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_row_major_nchw() {
        let t = Tensor::<f32>::from_fn(Shape::new(2, 3, 4, 5), |i| i as f32);
        assert_eq!(t.at(1, 2, 3, 4), 119.0);
        assert_eq!(t.plane(1, 0)[0], 60.0);
        assert_eq!(t.select_item(1).data()[0], 60.0);
    }

    #[test]
    fn stack_rejects_mismatched_items() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        let b = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 5));
        assert!(Tensor::stack(&[a.clone(), b]).is_err());
        assert_eq!(Tensor::stack(&[a.clone(), a]).unwrap().shape().n, 2);
    }

    #[test]
    fn flip_is_an_involution() {
        let t = Tensor::<f64>::from_fn(Shape::new(1, 2, 3, 4), |i| i as f64);
        assert_eq!(t.flip_horizontal().flip_horizontal(), t);
        assert_eq!(t.flip_horizontal().at(0, 0, 0, 0), 3.0);
    }
}
