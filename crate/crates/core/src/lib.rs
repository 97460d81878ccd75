//! Mixed-precision quantization-aware training with differentiable LSB
//! slicing, L1 LSB sparsification and Hessian-aware bit pruning.

pub mod accounting;
pub mod data;
pub mod error;
pub mod io;
pub mod model;
pub mod numerics;
pub mod quantize;
pub mod regularize;
pub mod schedule;
pub mod sensitivity;
pub mod train;

pub use error::{Error, Result};
