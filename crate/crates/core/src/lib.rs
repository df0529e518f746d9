//! MTS-Net: a 3D ResNet-18 (2+1)D classifier whose last two stages use
//! dual-enhanced positional multi-head self-attention, built on a small
//! from-scratch tensor and reverse-mode differentiation engine.
//!
//! Module map:
//! - [`tensor`]: tensors, the operation tape, MTSV1 files
//! - [`nn`]: convolution, batch normalization, pooling, linear layers
//! - [`attention`]: DEP-MHSA, its variants and the comparison modules
//! - [`model`]: backbone assembly, shape plan, parameter accounting, checkpoints
//! - [`data`]: CT windowing, cropping, clip assembly, synthetic subjects, splits
//! - [`train`]: loss, optimizers, schedule, metrics, training loop
//! - [`gradcheck`]: finite-difference verification of every differentiable op

pub mod attention;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
mod par;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Fill, Graph, Tensor, Var};
