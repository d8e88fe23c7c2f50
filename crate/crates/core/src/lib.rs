//! Tensor-graph superoptimisation: graph IR, rewrite engine, latency oracle,
//! search environment and non-learned baselines.

pub mod bench;
pub mod cost;
pub mod env;
pub mod graph;
pub mod rewrite;
pub mod scalar;
pub mod search;

pub use bench::Benchmark;
pub use cost::{CostFn, CostModel, CostParams, CostReport};
pub use graph::{CompGraph, GraphError, Node, NodeId, OpKind, TensorShape};
pub use scalar::Real;

/// Interpreter tensors at the default wide precision.
pub type Tensor64 = graph::DenseTensor<f64>;
pub type Tensor32 = graph::DenseTensor<f32>;
