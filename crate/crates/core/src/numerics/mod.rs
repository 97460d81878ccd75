//! Deterministic dense math, random streams, and differentiation oracles.

mod diff;
mod loss;
mod rng;
mod tensor;

pub use diff::finite_difference_gradient;
pub use loss::{argmax_rows, cross_entropy_with_grad};
pub use rng::{rademacher, streams, RngStream};
pub use tensor::{gemm, gemm_nt, gemm_tn, Tensor};

pub(crate) use tensor::{gemm_into, gemm_tn_into};
