//! Binary checkpoint container.
//!
//! Layout (all integers little-endian `u32`):
//! magic `MEMSCORE1`, version, header length, JSON header, tensor count, then
//! per tensor: name length, name bytes, rank, dims, raw `f32` data.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelError, Network};
use crate::image::ImageTensor;
use crate::preprocess::PipelineConfig;

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"MEMSCORE1";
pub const CHECKPOINT_VERSION: u32 = 1;
const MEAN_IMAGE_TENSOR: &str = "pipeline.mean_image";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("unsupported checkpoint format ({0})")]
    Version(String),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("checkpoint has unexpected tensor `{0}`")]
    UnexpectedTensor(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epoch: usize,
    pub step: usize,
    pub val_spearman: Option<f64>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_tag: String,
    config: ModelConfig,
    pipeline: PipelineConfig,
    train_meta: TrainMeta,
}

/// Weights plus everything needed to rebuild and run the model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model_tag: String,
    pub config: ModelConfig,
    pub pipeline: PipelineConfig,
    pub train_meta: TrainMeta,
    pub weights: Vec<(String, ArrayD<f32>)>,
}

impl Checkpoint {
    pub fn from_network(net: &Network<f32>, pipeline: PipelineConfig, train_meta: TrainMeta) -> Self {
        let weights: Vec<(String, ArrayD<f32>)> = net
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.as_standard_layout().into_owned()))
            .collect();
        let model_tag = format!("{}-{}", net.variant().name(), weights_digest(&weights));
        Checkpoint {
            model_tag,
            config: net.config().clone(),
            pipeline,
            train_meta,
            weights,
        }
    }

    /// Rebuild the network, checking every tensor against the graph built
    /// from the stored config.
    pub fn network(&self) -> Result<Network<f32>, CheckpointError> {
        let mut net = Network::<f32>::build(&self.config, 0)?;
        let expected: Vec<(String, Vec<usize>)> = net
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if let Some((name, _)) = self.weights.get(expected.len()) {
            return Err(CheckpointError::UnexpectedTensor(name.clone()));
        }
        for (i, (name, shape)) in expected.iter().enumerate() {
            let Some((found_name, t)) = self.weights.get(i) else {
                return Err(CheckpointError::MissingTensor(name.clone()));
            };
            if found_name != name {
                return Err(if self.weights.iter().any(|(n, _)| n == name) {
                    CheckpointError::UnexpectedTensor(found_name.clone())
                } else {
                    CheckpointError::MissingTensor(name.clone())
                });
            }
            if t.shape() != shape.as_slice() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        for (dst, (_, src)) in net.params_mut().into_iter().zip(&self.weights) {
            dst.assign(src);
        }
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model_tag: self.model_tag.clone(),
            config: self.config.clone(),
            pipeline: self.pipeline.clone(),
            train_meta: self.train_meta.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mean = match &self.pipeline {
            PipelineConfig::Legacy(l) => l.mean_image.as_ref().map(|m| m.0.clone().into_dyn()),
            PipelineConfig::Simple(_) => None,
        };

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(&header);
        let count = self.weights.len() + usize::from(mean.is_some());
        put_u32(&mut out, count as u32);
        let extra = mean.as_ref().map(|m| (MEAN_IMAGE_TENSOR, m));
        let all = self
            .weights
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .chain(extra);
        for (name, t) in all {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.ndim() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for v in t.as_standard_layout().iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(CHECKPOINT_MAGIC.len())?;
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Version("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(format!(
                "version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let count = r.u32()? as usize;
        let mut weights = Vec::with_capacity(count.min(4096));
        let mut mean_image = None;
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| CheckpointError::Header("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let mut dims = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                dims.push(r.u32()? as usize);
            }
            let len = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or(CheckpointError::Truncated)?;
            let data: Vec<f32> = r
                .take(len)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = ArrayD::from_shape_vec(IxDyn(&dims), data).expect("length checked");
            if name == MEAN_IMAGE_TENSOR {
                let m = t
                    .into_dimensionality()
                    .map_err(|_| CheckpointError::Header("mean image must be rank 3".into()))?;
                mean_image = Some(ImageTensor::new(m));
            } else {
                weights.push((name, t));
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Header("trailing bytes after tensors".into()));
        }
        let mut pipeline = header.pipeline;
        if let PipelineConfig::Legacy(l) = &mut pipeline {
            l.mean_image = mean_image;
        } else if mean_image.is_some() {
            return Err(CheckpointError::UnexpectedTensor(MEAN_IMAGE_TENSOR.into()));
        }
        Ok(Checkpoint {
            model_tag: header.model_tag,
            config: header.config,
            pipeline,
            train_meta: header.train_meta,
            weights,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Read and fully validate a checkpoint, returning it with its network.
    pub fn load(path: &Path) -> Result<(Checkpoint, Network<f32>), CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let ckpt = Checkpoint::from_bytes(&bytes)?;
        let net = ckpt.network()?;
        Ok((ckpt, net))
    }
}

/// First 8 hex digits of the SHA-256 over tensor names and raw weights.
fn weights_digest(weights: &[(String, ArrayD<f32>)]) -> String {
    let mut h = Sha256::new();
    for (name, t) in weights {
        h.update(name.as_bytes());
        for v in t.iter() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())[..8].to_string()
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Variant;
    use crate::preprocess::{LegacyPipelineConfig, SimplePipelineConfig};

    fn tiny(variant: Variant) -> (Network<f32>, Checkpoint) {
        let net = Network::build(&ModelConfig::tiny(variant), 3).unwrap();
        let ck = Checkpoint::from_network(
            &net,
            PipelineConfig::Simple(SimplePipelineConfig::identity(32)),
            TrainMeta::default(),
        );
        (net, ck)
    }

    #[test]
    fn bytes_round_trip() {
        let (_, ck) = tiny(Variant::M3m);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.model_tag, ck.model_tag);
        assert_eq!(back.config, ck.config);
        assert_eq!(back.weights, ck.weights);
        assert!(back.model_tag.starts_with("m3m-"));
    }

    #[test]
    fn wrong_magic_is_version_error() {
        let (_, ck) = tiny(Variant::Memnet);
        let mut b = ck.to_bytes();
        b[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&b), Err(CheckpointError::Version(_))));
        let mut b = ck.to_bytes();
        b[9] = 2;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(CheckpointError::Version(_))));
    }

    #[test]
    fn every_truncation_is_detected() {
        let (_, ck) = tiny(Variant::Memnet);
        let b = ck.to_bytes();
        for cut in [0, 5, 12, 20, b.len() / 2, b.len() - 1] {
            let err = Checkpoint::from_bytes(&b[..cut]).unwrap_err();
            assert!(
                matches!(err, CheckpointError::Truncated | CheckpointError::Version(_)),
                "cut {cut}: {err}"
            );
        }
    }

    #[test]
    fn edited_config_header_is_shape_mismatch() {
        let (_, mut ck) = tiny(Variant::Memnet);
        ck.config.conv.channels[0] = 9;
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert!(matches!(back.network(), Err(CheckpointError::ShapeMismatch { .. })));
    }

    #[test]
    fn missing_and_extra_tensors() {
        let (_, ck) = tiny(Variant::Resmem);
        let mut short = ck.clone();
        short.weights.pop();
        assert!(matches!(short.network(), Err(CheckpointError::MissingTensor(_))));
        let mut long = ck.clone();
        long.weights.push(("head.extra.weight".into(), ArrayD::zeros(IxDyn(&[1]))));
        assert!(matches!(long.network(), Err(CheckpointError::UnexpectedTensor(_))));
    }

    #[test]
    fn mean_image_travels_with_legacy_pipeline() {
        let net = Network::build(&ModelConfig::tiny(Variant::Memnet), 0).unwrap();
        let mut legacy = LegacyPipelineConfig::new(32);
        legacy.mean_image = Some(ImageTensor::filled(3, 64, 64, 0.25));
        let ck = Checkpoint::from_network(&net, PipelineConfig::Legacy(legacy.clone()), TrainMeta::default());
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.pipeline, PipelineConfig::Legacy(legacy));
    }
}
