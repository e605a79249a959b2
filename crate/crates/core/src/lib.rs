//! Speaker-adaptive mixture of LoRA experts on a block-wise NF4 quantised
//! base model.
//!
//! The crate is organised bottom-up: [`numerics`] provides tensors and a
//! differentiation tape, [`quantization`] the 4-bit block formats,
//! [`adapters`] LoRA modules and the mixture layer, [`model`] a small
//! transformer encoder hosting them, and [`pipeline`] the quantise,
//! pretrain and adapt procedure on a synthetic multi-speaker task.

pub mod adapters;
pub mod model;
pub mod error;
pub mod numerics;
pub mod pipeline;
pub mod quantization;

pub use error::{Error, Result};
pub use numerics::{Graph, NodeId, Optimizer, OptimizerConfig, ParamStore, SeededRng, Tensor};
