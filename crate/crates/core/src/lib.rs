//! Synthetic odd-one-out visual reasoning: panel generation, augmentation,
//! a contrastive perception encoder and a predict-and-verify outlier reasoner,
//! all on a small reverse-mode autodiff engine generic over the float type.

pub mod augment;
pub mod gradsuite;
pub mod numerics;
pub mod parm;
pub mod perception;
pub mod scalar;
pub mod taskgen;
pub mod trainer;

pub use scalar::Scalar;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Graph32 = numerics::Graph<f32>;
pub type Graph64 = numerics::Graph<f64>;
pub type ParamStore32 = numerics::ParamStore<f32>;
pub type ParamStore64 = numerics::ParamStore<f64>;
pub type Model32 = trainer::Model<f32>;
pub type Model64 = trainer::Model<f64>;
