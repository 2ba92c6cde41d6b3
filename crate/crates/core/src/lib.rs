//! Zero-shot audio captioning trained on text only.
//!
//! A toy contrastive dual encoder maps audio features and captions into one
//! embedding space. A caption decoder is trained to reconstruct captions from
//! soft prompts (a mapping network applied to augmented text embeddings) and
//! hard prompts (event labels retrieved in the joint space). At inference the
//! text encoder is swapped for the audio encoder.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

pub mod error;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;

pub mod decoder;
pub mod jointspace;
pub mod metrics;
pub mod pipeline;
pub mod prompts;
pub mod retrieval;
pub mod synthworld;

pub mod config;
pub mod store;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type DualEncoder32 = jointspace::DualEncoder<f32>;
pub type DualEncoder64 = jointspace::DualEncoder<f64>;
pub type Captioner32 = decoder::Captioner<f32>;
pub type Captioner64 = decoder::Captioner<f64>;
pub type Embedding32 = retrieval::Embedding<f32>;
pub type Embedding64 = retrieval::Embedding<f64>;
pub type Mat32 = tensor::Mat<f32>;
pub type Mat64 = tensor::Mat<f64>;
