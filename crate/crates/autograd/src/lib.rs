//! Minimal reverse-mode automatic differentiation over dense CPU tensors.
//!
//! The op set covers what a compact 2D U-Net needs: stride-1 convolutions,
//! 2x2 transposed convolutions, max pooling, instance normalization and a
//! handful of broadcasts. Anything else can be added from the outside through
//! [`CustomOp`].

mod error;
mod graph;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use error::{Result, TapeError};
pub use graph::{sigmoid, CustomOp, Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor;
