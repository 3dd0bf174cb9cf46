//! Scoring architectures: a plain convolutional trunk, the trunk plus a
//! residual backbone, and both plus a segmentation branch.

mod checkpoint;
mod config;
pub mod gradcheck;
mod network;

pub use checkpoint::{Checkpoint, CheckpointError, TrainMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{
    ConvFeatureConfig, ModelConfig, Preset, ResidualBackboneConfig, SegmentationFeatureConfig,
    Variant,
};
pub use network::{
    stack_images, Branch, CacheMode, Gradients, LayerAddress, Network, NetworkCache,
};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("model has no residual backbone to freeze")]
    NoBackbone,
    #[error("input shape mismatch: expected {expected:?}, found {found:?}")]
    InputShape {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
}
