//! Magnitude pruning versus verbatim memorization, at desk scale.

pub mod audit;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod model;
pub mod pruning;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{LayerParams, LinearKind, ModelConfig, ModelParams, TokenSequence};
pub use tensor::Tensor2D;
