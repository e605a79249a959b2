//! Dense tensors, a differentiation tape and optimizers.

pub mod graph;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tensor;

pub use graph::{Graph, NodeId};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use param::{Component, ParamId, ParamStore, Parameter};
pub use rng::SeededRng;
pub use tensor::{cross_entropy, matmul, softmax, Tensor};
