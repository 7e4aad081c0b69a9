//! Calibration-free multi-camera bird's-eye-view transformer.
//!
//! The model maps six surround-view feature maps onto a BEV grid without ever
//! seeing camera intrinsics or extrinsics. All math is generic over
//! [`numerics::Real`]; `f32` is used for training and `f64` for gradient and
//! equivalence checks.

pub mod costmodel;
pub mod dethead;
pub mod encodings;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod pa;
pub mod scenegen;
pub mod va;

pub use error::{Error, Result};

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Graph32 = numerics::Graph<f32>;
pub type Graph64 = numerics::Graph<f64>;
