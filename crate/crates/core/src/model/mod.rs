//! Desk-scale reranking transformer with explicit gradients.

mod config;
mod optim;
mod params;
mod tokens;
mod train;
mod transformer;

use thiserror::Error;

pub use config::ModelConfig;
pub use optim::{Adam, AdamSettings};
pub use params::{ParamLayout, ParamSlot, RerankerParams};
pub use tokens::{assemble_tokens, frequency_encode, EpeInput, TokenSequence};
pub use train::{
    attention_concentration, pair_loss, score_pair, train, AttentionConcentration, EpochLog, PairLoss,
    Schedule, TrainPair, TrainingSet,
};
pub use transformer::{backward, forward, CrossAttentionMaps, ForwardCache, ForwardOutput, OutputGradients};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("epipolar encoding is enabled but no geometry was supplied")]
    MissingGeometry,
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(String),
    #[error("cached activations do not belong to these parameters")]
    CacheMismatch,
}
