//! Progressive adversarial generator-encoder models.
//!
//! A symmetric convolutional encoder/decoder pair is grown from 4x4 up to the
//! target resolution. The encoder plays both roles of an adversarial game over
//! latent-code divergences; a hinge margin on the KL gap and spectral
//! normalization keep the game balanced.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod latent_ops;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod normalization;
pub mod tensor;
pub mod trainer;

pub use config::{Config, Preset};
pub use data::{Dataset, DatasetSpec};
pub use error::{Error, Result};
pub use latent_ops::{AttributeVector, GridSpec, Interpolation};
pub use losses::{LossReport, LossWeights, Margin, MarginEntry, MarginSchedule};
pub use model::{FrozenModel, ImageBatch, LatentCode, NetworkConfig, PhaseState};
pub use metrics::{FeatureExtractor, FeatureStats};
pub use normalization::NormScheme;
pub use tensor::Tensor;
pub use trainer::{TrainConfig, TrainState};
