//! Depth-level dynamic neural networks: one set of weights runnable at
//! several depths, trained jointly with hard labels, posterior distillation
//! and attention-map matching from the deepest net to the shallower ones.

pub mod accounting;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod ddnn;
pub mod ekd;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Graph, Param, Scalar, Tensor, Var};
