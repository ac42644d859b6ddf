//! Sound matching for a differentiable feed-forward compressor.
//!
//! The compressor has five parameters (threshold, make-up gain, ratio,
//! attack and release). Given an input recording and a compressed target,
//! [`optim::fit`] recovers them with damped Newton-Raphson steps driven by
//! exact Hessians from [`autodiff`].

pub mod autodiff;
pub mod compressor;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod param_map;
pub mod scan;
pub mod signal;
pub mod synth;

pub use autodiff::{Evaluation, Gradient, Hessian, HessianStrategy, Objective};
pub use compressor::{compress, CompressorParams, ForwardTrace, ParamBounds, ThetaRaw};
pub use error::{Error, Result};
pub use signal::{AudioBuffer, AudioPair, ChunkPlan};
