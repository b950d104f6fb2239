//! Dense row-major tensors.
//!
//! Images and feature maps are stored channel-major (`[channels, height, width]`);
//! convolution weights are `[out, in, kh, kw]`; matrices are `[rows, cols]`.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format_args!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Builds a `[c, h, w]` tensor by evaluating `f(c, y, x)`.
    pub fn from_fn_chw(c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ci, y, x));
                }
            }
        }
        Self { shape: vec![c, h, w], data }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// `(channels, height, width)`; panics unless the tensor is 3-D.
    #[inline]
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected a [c, h, w] tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn check_chw(&self, what: &str) -> Result<(usize, usize, usize)> {
        if self.shape.len() != 3 {
            return Err(Error::shape(format_args!("{what}: expected [c, h, w], got {:?}", self.shape)));
        }
        Ok(self.chw())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format_args!("cannot reshape {:?} to {:?}", self.shape, shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Plane of channel `c` of a `[c, h, w]` tensor.
    #[inline]
    pub fn channel(&self, c: usize) -> &[T] {
        let (_, h, w) = self.chw();
        &self.data[c * h * w..(c + 1) * h * w]
    }

    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let (_, h, w) = self.chw();
        &mut self.data[c * h * w..(c + 1) * h * w]
    }

    /// Channels `start..start + len` as a new tensor.
    pub fn channels(&self, start: usize, len: usize) -> Self {
        let (c, h, w) = self.chw();
        assert!(start + len <= c);
        Self { shape: vec![len, h, w], data: self.data[start * h * w..(start + len) * h * w].to_vec() }
    }

    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self> {
        let (_, h, w) = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?.check_chw("concat")?;
        let mut data = Vec::new();
        let mut c = 0;
        for p in parts {
            let (pc, ph, pw) = p.check_chw("concat")?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape(format_args!("concat: {}x{} vs {}x{}", ph, pw, h, w)));
            }
            c += pc;
            data.extend_from_slice(&p.data);
        }
        Ok(Self { shape: vec![c, h, w], data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.sum() / T::lit(self.data.len() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::lit(v.as_f64())).collect() }
    }

    /// Crops a `[c, h, w]` tensor to the top-left `h × w` window.
    pub fn crop(&self, h: usize, w: usize) -> Self {
        let (c, sh, sw) = self.chw();
        assert!(h <= sh && w <= sw);
        Self::from_fn_chw(c, h, w, |ci, y, x| self.data[(ci * sh + y) * sw + x])
    }
}

impl<T: Real> Index<[usize; 3]> for Tensor<T> {
    type Output = T;

    #[inline]
    fn index(&self, [c, y, x]: [usize; 3]) -> &T {
        let h = self.shape[1];
        let w = self.shape[2];
        &self.data[(c * h + y) * w + x]
    }
}

impl<T: Real> IndexMut<[usize; 3]> for Tensor<T> {
    #[inline]
    fn index_mut(&mut self, [c, y, x]: [usize; 3]) -> &mut T {
        let h = self.shape[1];
        let w = self.shape[2];
        &mut self.data[(c * h + y) * w + x]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f64>::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        let t = Tensor::<f64>::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t[[0, 1, 0]], 3.0);
    }

    #[test]
    fn concat_and_slice() {
        let a = Tensor::<f32>::full(&[1, 2, 3], 1.0);
        let b = Tensor::<f32>::full(&[2, 2, 3], 2.0);
        let c = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 2, 3]);
        assert_eq!(c.channels(1, 2), b);
        assert!(Tensor::concat_channels(&[&a, &Tensor::zeros(&[1, 3, 3])]).is_err());
    }
}
