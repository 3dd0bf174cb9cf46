//! The inference path shared by evaluation, the CLI and the HTTP service.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::image::{load_image, ImageError, ImageTensor};
use crate::models::{Checkpoint, CheckpointError, ModelError, Network, TrainMeta};
use crate::preprocess::{
    legacy_crops, legacy_scale, simple_forward_transform, PipelineConfig, PreprocessError,
};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Anything that maps a decoded image to a memorability score in `[0, 1]`.
pub trait Scorer: Sync {
    fn score(&self, image: &ImageTensor) -> Result<f64, ScoreError>;

    fn score_batch(&self, images: &[ImageTensor]) -> Result<Vec<f64>, ScoreError> {
        images.iter().map(|i| self.score(i)).collect()
    }
}

/// Resolves manifest image references to pixels.
pub trait ImageSource: Sync {
    fn load(&self, image_ref: &str) -> Result<ImageTensor, ImageError>;
}

/// Image files on disk; relative references resolve against `root`.
#[derive(Clone, Debug)]
pub struct DirSource {
    root: PathBuf,
}

impl DirSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirSource { root: root.into() }
    }

    /// Resolve references relative to the directory holding `manifest_path`.
    pub fn for_manifest(manifest_path: &Path) -> Self {
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        DirSource { root }
    }

    pub fn resolve(&self, image_ref: &str) -> PathBuf {
        self.root.join(image_ref)
    }
}

impl ImageSource for DirSource {
    fn load(&self, image_ref: &str) -> Result<ImageTensor, ImageError> {
        load_image(&self.resolve(image_ref))
    }
}

/// Images held in memory, keyed by reference.
#[derive(Clone, Debug, Default)]
pub struct MemorySource {
    pub images: HashMap<String, ImageTensor>,
}

impl MemorySource {
    pub fn insert(&mut self, image_ref: impl Into<String>, image: ImageTensor) {
        self.images.insert(image_ref.into(), image);
    }
}

impl ImageSource for MemorySource {
    fn load(&self, image_ref: &str) -> Result<ImageTensor, ImageError> {
        self.images.get(image_ref).cloned().ok_or_else(|| ImageError::Io {
            path: image_ref.to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such image"),
        })
    }
}

/// A network with its input pipeline. Immutable once built, so one instance
/// can serve concurrent requests.
#[derive(Clone, Debug)]
pub struct ScoringModel {
    network: Network<f32>,
    pipeline: PipelineConfig,
    model_tag: String,
}

impl ScoringModel {
    pub fn new(network: Network<f32>, pipeline: PipelineConfig) -> Self {
        let tag = Checkpoint::from_network(&network, pipeline.clone(), TrainMeta::default()).model_tag;
        ScoringModel {
            network,
            pipeline,
            model_tag: tag,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, CheckpointError> {
        Ok(ScoringModel {
            network: ckpt.network()?,
            pipeline: ckpt.pipeline.clone(),
            model_tag: ckpt.model_tag.clone(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let (ckpt, network) = Checkpoint::load(path)?;
        Ok(ScoringModel {
            network,
            pipeline: ckpt.pipeline,
            model_tag: ckpt.model_tag,
        })
    }

    pub fn network(&self) -> &Network<f32> {
        &self.network
    }

    pub fn pipeline(&self) -> &PipelineConfig {
        &self.pipeline
    }

    pub fn model_tag(&self) -> &str {
        &self.model_tag
    }

    pub fn pipeline_tag(&self) -> &'static str {
        self.pipeline.tag()
    }

    /// Model-ready tensor for the simple pipeline.
    pub fn prepare(&self, image: &ImageTensor) -> Result<Vec<ImageTensor>, ScoreError> {
        Ok(match &self.pipeline {
            PipelineConfig::Simple(cfg) => vec![simple_forward_transform(image, cfg)?],
            PipelineConfig::Legacy(cfg) => legacy_crops(image, cfg)?,
        })
    }
}

impl Scorer for ScoringModel {
    fn score(&self, image: &ImageTensor) -> Result<f64, ScoreError> {
        Ok(self.score_batch(std::slice::from_ref(image))?[0])
    }

    fn score_batch(&self, images: &[ImageTensor]) -> Result<Vec<f64>, ScoreError> {
        let mut inputs = Vec::new();
        for img in images {
            inputs.extend(self.prepare(img)?);
        }
        let raw = self.network.score_images(&inputs)?;
        Ok(match &self.pipeline {
            PipelineConfig::Simple(_) => raw.iter().map(|&s| (s as f64).clamp(0.0, 1.0)).collect(),
            PipelineConfig::Legacy(cfg) => raw
                .chunks(10)
                .map(|c| legacy_scale(&c.iter().map(|&s| s as f64).collect::<Vec<_>>(), cfg))
                .collect(),
        })
    }
}
