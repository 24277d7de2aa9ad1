//! Minimal neural-network toolkit: tensors, a reverse-mode autodiff tape,
//! dense/conv/batch-norm/dropout/leaky-ReLU layers, Adam and binary checkpoints.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the aliases below are
//! the two instantiations used in practice.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod layers;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use adam::AdamState;
pub use checkpoint::Checkpoint;
pub use error::{NnError, Result};
pub use graph::{softmax_into, Graph, Var};
pub use layers::{Layer, LayerSpec, Sequential};
pub use params::{kaiming_uniform, Param, ParamId, ParamStore};
pub use scalar::{gemm, MatRef, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
