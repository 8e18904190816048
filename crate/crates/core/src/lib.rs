//! Data-free backbone compression toolkit.
//!
//! The crate covers the whole compression story for small convolutional
//! networks: a from-scratch tensor/autodiff engine sized to exactly the
//! operator set the pipeline needs, a layer-graph representation with a
//! backbone/head split, structured filter pruning with channel rewiring,
//! label-free image synthesis against frozen batch-norm statistics, and
//! distillation fine-tuning of the pruned backbone against the unpruned
//! teacher's feature maps.
//!
//! All numeric code is generic over the scalar type; f32 is the working
//! precision for training and inference, f64 instantiations back the
//! finite-difference gradient checks.

pub mod data;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod hash;
pub mod kernels;
pub mod optim;
pub mod prune;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};

/// Working-precision aliases used by the CLI and the pipeline.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph32 = graph::NetworkGraph<f32>;
pub type Tape32 = tape::Tape<f32>;

/// Double-precision aliases for gradient-check builds.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph64 = graph::NetworkGraph<f64>;
pub type Tape64 = tape::Tape<f64>;
