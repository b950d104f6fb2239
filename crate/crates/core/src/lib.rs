//! Lightweight video frame interpolation on block-PCA compressed frames.
//!
//! The crate is `no_std` (with `alloc`); the `std` feature only enables
//! runtime CPU feature detection in the matrix-multiply backend.
#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` style checks deliberately reject NaN along with the range.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

extern crate alloc;

pub mod data_eval;
pub mod eigen;
pub mod error;
pub mod fldr;
pub mod flownet;
pub mod fusion;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod pipeline;
pub mod real;
pub mod synthetic;
pub mod tensor;
pub mod training;
pub mod viz;
pub mod warp;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use real::{Real, View, ViewMut};
pub use tensor::Tensor;
