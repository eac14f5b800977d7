//! Reverse-mode automatic differentiation over dense row-major CPU tensors.
//!
//! A [`Graph`] records one forward evaluation. Every op computes its value
//! eagerly and, when the graph records, stores a closure that maps the output
//! gradient to the gradients of its inputs. Parameters live in a
//! [`ParamStore`] that the graph borrows; frozen leaves are bound as
//! constants so no gradient work is spent on them.
//!
//! All ops are generic over [`Scalar`] so the same model code runs in `f32`
//! for training and in `f64` for finite-difference verification.

pub mod check;
mod graph;
pub mod ops;
mod params;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use ops::conv::Conv2dGeometry;
pub use ops::elementwise::{gelu, sigmoid};
pub use ops::linalg::softmax_last;
pub use ops::sparse::Csr;
pub use params::{Leaf, LeafKind, ParamId, ParamStore};
pub use scalar::{gemm, Scalar};
pub use tensor::{inverse_permutation, numel, strides, Tensor};
