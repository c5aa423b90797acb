//! Early-exit inference on a small CNN: bag-of-features exit heads, an
//! exit-point predictor, DVFS energy accounting and the strategies that
//! tie them together.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod blob;
pub mod dataset;
pub mod energy;
pub mod error;
pub mod exit_head;
pub mod harness;
pub mod pipeline;
pub mod predictor;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type WeightStore32 = backbone::WeightStore<f32>;
pub type WeightStore64 = backbone::WeightStore<f64>;
pub type ExitHead32 = exit_head::ExitHead<f32>;
pub type ExitHead64 = exit_head::ExitHead<f64>;
pub type HeadSet32 = exit_head::HeadSet<f32>;
pub type HeadSet64 = exit_head::HeadSet<f64>;
pub type PredictorConfig32 = predictor::PredictorConfig<f32>;
pub type PredictorConfig64 = predictor::PredictorConfig<f64>;
pub type TraceRecord32 = harness::TraceRecord<f32>;
pub type TraceRecord64 = harness::TraceRecord<f64>;
pub type Dataset32 = dataset::LabeledDataset<f32>;
pub type Dataset64 = dataset::LabeledDataset<f64>;
