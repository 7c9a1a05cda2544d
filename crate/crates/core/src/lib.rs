//! Multi-granularity speech/text alignment for emotion recognition.
//!
//! Three alignment objectives are composed over paired speech and text token
//! features: a distribution-level contrastive loss between diagonal Gaussian
//! utterance embeddings, token-level alignment by stacked self/cross
//! attention, and an instance-level contrastive loss between pooled
//! utterance vectors. A cross-entropy head supplies supervision.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below pin the `f64` instantiation used by the harness and the
//! on-disk formats.

pub mod attention;
pub mod checkpoint;
pub mod contrastive;
pub mod data;
pub mod distribution;
pub mod error;
pub mod harness;
pub mod instance;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod token;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{grad_check, grad_check_many, Gradients, Graph, NodeId, ParamId, ParameterStore};

pub type Tensor<T = f64> = tensor::Tensor<T>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type ParameterStore64 = tensor::ParameterStore<f64>;
pub type MgcmaModel64 = pipeline::MgcmaModel<f64>;
pub type PairBatch64 = data::PairBatch<f64>;
pub type GaussianEmbedding64 = distribution::GaussianEmbedding<f64>;
