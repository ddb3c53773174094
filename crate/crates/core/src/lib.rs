//! Spatiotemporal ConvLSTM network for steering-angle regression.
//!
//! The crate is a small CPU deep-learning engine built around one model:
//! four ConvLSTM + batch-norm layers, a temporal-collapsing 3D convolution
//! and a two-layer dense head. A single-frame 2D CNN baseline, a synthetic
//! lane dataset, Adam training and finite-difference gradient checks are
//! included.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod error;
mod fsutil;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;

pub use error::{Error, FormatError, Result};
pub use tensor::{Scalar, Tensor};
