//! Convolution layers with owned weights and their graph bindings.

use alloc::vec::Vec;

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    /// `[out, in, kh, kw]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv<T> {
    /// He-uniform weights (scaled by `gain`), zero bias.
    pub fn init<R: Rng + ?Sized>(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, gain: f64, rng: &mut R) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let bound = gain * libm_sqrt(6.0 / fan_in);
        let n = cout * cin * kernel * kernel;
        let data: Vec<T> = (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
        Self {
            weight: Tensor::from_vec(&[cout, cin, kernel, kernel], data).expect("conv weight"),
            bias: Tensor::zeros(&[cout]),
            stride,
            pad,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundConv {
        let (w, b) = if trainable {
            (g.param(self.weight.clone()), g.param(self.bias.clone()))
        } else {
            (g.constant(self.weight.clone()), g.constant(self.bias.clone()))
        };
        BoundConv { w, b, stride: self.stride, pad: self.pad }
    }

    pub fn cast<U: Real>(&self) -> Conv<U> {
        Conv { weight: self.weight.cast(), bias: self.bias.cast(), stride: self.stride, pad: self.pad }
    }

    pub fn zero(&mut self) {
        self.weight.data_mut().fill(T::zero());
        self.bias.data_mut().fill(T::zero());
    }
}

fn libm_sqrt(v: f64) -> f64 {
    num_traits::Float::sqrt(v)
}

/// A [`Conv`] whose parameters live in a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct BoundConv {
    pub w: Var,
    pub b: Var,
    pub stride: usize,
    pub pad: usize,
}

impl BoundConv {
    pub fn apply<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        g.conv2d(x, self.w, self.b, self.stride, self.pad)
    }

    pub fn apply_relu<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let y = self.apply(g, x);
        g.relu(y)
    }
}
