//! Std companion of `fldr-core`: frame files, checkpoints, run configuration,
//! sequence interpolation, evaluation reports and the command-line interface.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod io;
pub mod sequence;
pub mod study;

pub use error::{FldrError, Result};
