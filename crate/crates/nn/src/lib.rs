//! A small convolutional network engine: NHWC `f32` tensors, a static layer graph with
//! Keras-compatible layer and weight naming, inference and taped training passes,
//! reverse-mode gradients, and Adam.
//!
//! Normalisation layers always use their stored statistics, so every sample in a batch is
//! processed independently and gradients can be accumulated over micro-batches exactly.

pub mod error;
pub mod gemm;
pub mod graph;
pub mod init;
pub mod kernels;
pub mod optim;
pub mod param;
pub mod seed;
pub mod tensor;

pub use error::NnError;
pub use graph::{Activation, GradSeed, Graph, GraphBuilder, Node, NodeId, Op, Pad, Tape};
pub use kernels::{PadFill, Padding};
pub use optim::Adam;
pub use param::{Grads, Param, ParamId, ParamRole, ParamStore};
pub use seed::{derive_seed, derive_seed_n, rng_for};
pub use tensor::Tensor;
