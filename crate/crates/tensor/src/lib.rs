//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The op set is small and fixed: what a convolutional segmentation network
//! with non-local attention and a codebook encoder needs, plus a
//! central-difference gradient checker.
//!
//! ```
//! use nlcen_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.input(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum_all(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

pub mod checkpoint;
mod error;
mod gemm;
pub mod gradcheck;
mod graph;
mod kernels;
mod kind;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{sigmoid, BatchStats, Gradients, Graph, NormMode, Var, BN_EPS};
pub use kind::OpKind;
pub use params::{ParamStore, Parameter};
pub use tensor::Tensor;
