//! Differentially private masked-prediction pre-training at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`params`], [`tape`]: dense tensors, named-layer parameter
//!   trees and a reverse-mode tape producing per-example gradients.
//! * [`model`], [`bestrq`], [`probe`]: a small dense encoder, the
//!   random-projection-quantizer masked-prediction task and a downstream
//!   frame-classification probe.
//! * [`dp`], [`optim`]: per-example clipping (global and per-layer), Gaussian
//!   noise and Adam.
//! * [`freeze`]: gradient-based layer freezing.
//! * [`accountant`], [`planner`]: RDP accounting and scale-up planning.
//! * [`checkpoint`], [`config`], [`pipeline`]: persistence, run
//!   configuration and the staged training pipeline.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); generic types
//! default to `f64`, and the pipeline runs in `f64`.

pub mod accountant;
pub mod bestrq;
pub mod checkpoint;
pub mod config;
pub mod dp;
pub mod error;
pub mod freeze;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod planner;
pub mod probe;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{GradTree, Layer, ParamTree};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamTree32 = ParamTree<f32>;
pub type ParamTree64 = ParamTree<f64>;
pub type GradTree32 = GradTree<f32>;
pub type GradTree64 = GradTree<f64>;
