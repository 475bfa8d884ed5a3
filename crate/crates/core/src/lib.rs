pub mod architectures;
pub mod commands;
pub mod datapipe;
pub mod error;
pub mod eval;
pub mod layers;
pub mod lstm;
pub mod synthgen;
pub mod tensor;
pub mod training;

pub use architectures::{Family, InputMode, Model, ModelSpec};
pub use datapipe::Sample;
pub use error::{Error, Result};
pub use tensor::{activation, elementwise, matmul, softmax, Activation, ElementwiseOp, Tensor};
pub use training::{train, AdamConfig, AdamState, TrainConfig, TrainHistory};
