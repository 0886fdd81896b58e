//! Numerical kernel whose only source of cross-device variation is the
//! accumulation order of reductions.

mod data;
pub mod layers;
mod model;
mod reduce;
mod rng;
mod tensor;

use thiserror::Error;

pub use data::{make_dataset, Batcher, Dataset};
pub use layers::DenseGrads;
pub use model::{
    evaluate, init_weights, DenseParams, Evaluation, LayerSpec, LossKind, ModelShape, ModelSpec,
    ModelWeights,
};
pub use reduce::{reduce, DeviceProfile, Strategy};
pub use rng::Rng;
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} is not a valid class index for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("invalid model or data specification: {0}")]
    InvalidSpec(String),
    #[error("invalid device profile: {0}")]
    InvalidProfile(String),
}
