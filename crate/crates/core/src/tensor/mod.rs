//! Dense tensors with reverse-mode automatic differentiation.

mod conv;
mod dense;
pub mod fault;
pub mod gradcheck;
mod optim;
mod scalar;
mod tape;

pub use conv::Conv2dGeom;
pub use dense::{ParamId, ParamStore, Result, Tensor, TensorError};
pub use optim::{adamw_update, clip_grad_norm, AdamW, AdamWConfig, AdamWState};
pub use scalar::{gemm, Scalar, Strides};
pub use tape::{CustomOp, Gradients, Tape, Unary, Var};

#[cfg(test)]
mod tests;
