//! Post-training quantization toolkit for selective state-space (Mamba)
//! models at toy scale.
//!
//! The pipeline: build a deterministic model, run calibration data through
//! it collecting per-interface statistics, fuse equivalence-preserving
//! rewrites (norm folding, offline eigenvector-enhanced rotation, smoothing
//! through the gate and the state matmul, online Hadamard rotations), then
//! fake-quantize weights and activations and measure what the rewrites
//! bought. Every rewrite is checked numerically against the untransformed
//! model.

// index loops over matrix coordinates are the clearer idiom in the numeric
// kernels here
#![allow(clippy::needless_range_loop)]

pub mod calib;
pub mod cli;
pub mod eigh;
pub mod error;
pub mod io;
pub mod model;
pub mod quant;
pub mod report;
pub mod rng;
pub mod rotation;
pub mod scan;
pub mod tensor;
pub mod transform;

pub use error::{MqError, Result};
pub use model::{init_model, MambaModel, ModelConfig, Tap, TapRecorder};
pub use tensor::Tensor;
