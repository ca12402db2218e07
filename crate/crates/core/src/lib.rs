//! Self-supervised attention for re-identification at desk scale.
//!
//! The crate contains a small reverse-mode autodiff engine over `f64`
//! tensors, the attention computing module, a three-branch network (global,
//! attentional, rotation-pretext), its training objectives, data pipeline,
//! optimizer and schedules, and retrieval evaluation.

// `!(x > 0.0)` style guards reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acm;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::Tensor;
