//! Tensors, the differentiable operation catalog, Adam and checkpoints.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;
mod tensor;

use thiserror::Error;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Fault, Gradients, Graph, Var, COSINE_EPS};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("invalid shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: non-finite output")]
    NonFinite { op: &'static str },
    #[error("{stage}: non-finite value for panel {panel}")]
    NonFinitePanel { stage: &'static str, panel: String },
    #[error("backward called on a value that was never computed on this graph")]
    NoForward,
    #[error("loss must have one element, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("parameter mismatch: {}", .0.join("; "))]
    ParamMismatch(Vec<String>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
