//! Concept-based neural-symbolic classification.
//!
//! The pipeline pseudo-labels concepts from image/text similarity
//! ([`alignment`]), encodes backbone features into concept probabilities and
//! embeddings ([`encoder`]), learns per-class fuzzy rules over those concepts
//! ([`symbolic`]) and trains everything jointly with a fused classifier
//! ([`training`]). [`autodiff`] is the small reverse-mode engine underneath.

pub mod alignment;
pub mod autodiff;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod formats;
pub mod fuzzy;
pub mod metrics;
pub mod symbolic;
pub mod tensor;
pub mod training;

pub use dataset::{Batch, Dataset};
pub use error::{Error, Result};
pub use symbolic::Semantics;
pub use tensor::Tensor;
pub use training::{evaluate, train, Hyperparams, ModelConfig, ModelParams};
