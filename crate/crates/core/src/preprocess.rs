//! Input pipelines: the reconstructed legacy ten-crop pipeline and the simple
//! resize-and-normalize pipeline used by the newer architectures.
//!
//! Legacy order of operations: resize so the short side is `crop_size + 32`,
//! subtract the mean image, take ten crops, score each crop, average, then
//! apply `(raw - scale_b) / scale_a` and clip to `[0, 1]`. The mean offset is
//! applied before cropping.

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::ImageTensor;

/// Extra pixels added to the crop size to get the short side of the resized
/// input in the legacy pipeline.
pub const LEGACY_RESIZE_MARGIN: usize = 32;

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("image {height}x{width} is smaller than crop size {crop}")]
    TooSmall {
        height: usize,
        width: usize,
        crop: usize,
    },
    #[error("expected 3 channels, got {0}")]
    Channels(usize),
    #[error("empty image")]
    Empty,
    #[error("mean image shape {mean:?} does not match resized input {input:?}")]
    MeanShape {
        mean: (usize, usize, usize),
        input: (usize, usize, usize),
    },
    #[error("invalid pipeline config: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum LegacyForwardError<E> {
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error("model error: {0}")]
    Model(E),
}

/// Resize + per-channel normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplePipelineConfig {
    pub target_size: usize,
    pub per_channel_mean: [f32; 3],
    pub per_channel_std: [f32; 3],
}

impl SimplePipelineConfig {
    /// ImageNet channel statistics.
    pub fn imagenet(target_size: usize) -> Self {
        SimplePipelineConfig {
            target_size,
            per_channel_mean: [0.485, 0.456, 0.406],
            per_channel_std: [0.229, 0.224, 0.225],
        }
    }

    pub fn identity(target_size: usize) -> Self {
        SimplePipelineConfig {
            target_size,
            per_channel_mean: [0.0; 3],
            per_channel_std: [1.0; 3],
        }
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.target_size == 0 {
            return Err(PreprocessError::Config("target_size must be positive".into()));
        }
        // negated so NaN is rejected too
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if self.per_channel_std.iter().any(|&s| !(s > 0.0)) {
            return Err(PreprocessError::Config(
                "per_channel_std components must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Reconstructed legacy preprocessing. The scaling constants of the original
/// deployment are unknown, so they are plain configuration (default `a = 1`,
/// `b = 0`, i.e. no rescaling).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LegacyPipelineConfig {
    pub crop_size: usize,
    pub scale_a: f64,
    pub scale_b: f64,
    /// Stored as a raw tensor next to the config in checkpoints.
    #[serde(skip)]
    pub mean_image: Option<ImageTensor>,
}

impl LegacyPipelineConfig {
    pub fn new(crop_size: usize) -> Self {
        LegacyPipelineConfig {
            crop_size,
            scale_a: 1.0,
            scale_b: 0.0,
            mean_image: None,
        }
    }

    /// Placeholder preset for users who recover the original scaling
    /// constants; until then it is identical to [`LegacyPipelineConfig::new`]
    /// at the reference 227-pixel crop.
    pub fn legacy_demo() -> Self {
        Self::new(227)
    }

    pub fn resized_side(&self) -> usize {
        self.crop_size + LEGACY_RESIZE_MARGIN
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.scale_a == 0.0 || !self.scale_a.is_finite() {
            return Err(PreprocessError::Config("scale_a must be non-zero".into()));
        }
        if self.crop_size == 0 {
            return Err(PreprocessError::Config("crop_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PipelineConfig {
    Simple(SimplePipelineConfig),
    Legacy(LegacyPipelineConfig),
}

impl PipelineConfig {
    pub fn tag(&self) -> &'static str {
        match self {
            PipelineConfig::Simple(_) => "simple",
            PipelineConfig::Legacy(_) => "legacy",
        }
    }

    /// Side length of the tensors this pipeline feeds to the model.
    pub fn model_input_size(&self) -> usize {
        match self {
            PipelineConfig::Simple(c) => c.target_size,
            PipelineConfig::Legacy(c) => c.crop_size,
        }
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        match self {
            PipelineConfig::Simple(c) => c.validate(),
            PipelineConfig::Legacy(c) => c.validate(),
        }
    }
}

/// Bilinear resize with half-pixel centers and edge clamping. Resizing to the
/// input size is an exact identity.
pub fn resize_bilinear(image: &ImageTensor, out_h: usize, out_w: usize) -> ImageTensor {
    let (c, h, w) = image.shape();
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    let src = image.data();
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (pos - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let mut out = Array3::zeros((c, out_h, out_w));
    for ch in 0..c {
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                let top = src[[ch, y0, x0]] * (1.0 - wx) + src[[ch, y0, x1]] * wx;
                let bottom = src[[ch, y1, x0]] * (1.0 - wx) + src[[ch, y1, x1]] * wx;
                out[[ch, oy, ox]] = top * (1.0 - wy) + bottom * wy;
            }
        }
    }
    ImageTensor(out)
}

/// Ten-crop transformation.
///
/// Order: `[TL, TR, BL, BR, C]` from the image, then the same five positions
/// taken from the horizontally mirrored image. The mirrored-image crop at a
/// position equals the flip of the original crop at the mirrored position
/// (mirrored TL is the flip of TR, mirrored C is the flip of C).
pub fn ten_crop(image: &ImageTensor, crop_size: usize) -> Result<Vec<ImageTensor>, PreprocessError> {
    let (_, h, w) = image.shape();
    if crop_size == 0 || h < crop_size || w < crop_size {
        return Err(PreprocessError::TooSmall {
            height: h,
            width: w,
            crop: crop_size,
        });
    }
    let positions = [
        (0, 0),
        (0, w - crop_size),
        (h - crop_size, 0),
        (h - crop_size, w - crop_size),
        ((h - crop_size) / 2, (w - crop_size) / 2),
    ];
    let mirrored = image.flip_horizontal();
    let mut crops = Vec::with_capacity(10);
    for src in [image, &mirrored] {
        for &(top, left) in &positions {
            crops.push(src.crop(top, left, crop_size, crop_size));
        }
    }
    Ok(crops)
}

/// Resize, subtract the mean image and ten-crop: everything in the legacy
/// pipeline that happens before the model.
pub fn legacy_crops(
    image: &ImageTensor,
    cfg: &LegacyPipelineConfig,
) -> Result<Vec<ImageTensor>, PreprocessError> {
    cfg.validate()?;
    let (_, h, w) = image.shape();
    if h == 0 || w == 0 {
        return Err(PreprocessError::Empty);
    }
    let short = cfg.resized_side();
    let (nh, nw) = if h <= w {
        (short, ((w as f64 * short as f64 / h as f64).round() as usize).max(short))
    } else {
        (((h as f64 * short as f64 / w as f64).round() as usize).max(short), short)
    };
    let mut resized = resize_bilinear(image, nh, nw);
    match &cfg.mean_image {
        Some(mean) => {
            if mean.shape() != resized.shape() {
                return Err(PreprocessError::MeanShape {
                    mean: mean.shape(),
                    input: resized.shape(),
                });
            }
            resized.0 -= &mean.0;
        }
        None => log::warn!("legacy pipeline has no mean image; using a zero offset"),
    }
    ten_crop(&resized, cfg.crop_size)
}

/// Final legacy scaling: `(mean_score - b) / a`, clipped to `[0, 1]`.
pub fn legacy_scale(crop_scores: &[f64], cfg: &LegacyPipelineConfig) -> f64 {
    let mean = crop_scores.iter().sum::<f64>() / crop_scores.len() as f64;
    ((mean - cfg.scale_b) / cfg.scale_a).clamp(0.0, 1.0)
}

/// Score an image through the legacy pipeline using `model` on each crop.
pub fn legacy_forward<E, F>(
    image: &ImageTensor,
    mut model: F,
    cfg: &LegacyPipelineConfig,
) -> Result<f64, LegacyForwardError<E>>
where
    F: FnMut(&ImageTensor) -> Result<f64, E>,
{
    let crops = legacy_crops(image, cfg)?;
    let scores = crops
        .iter()
        .map(|c| model(c).map_err(LegacyForwardError::Model))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(legacy_scale(&scores, cfg))
}

/// Bilinear resize to `target_size` square, then `(x - mean) / std` per channel.
pub fn simple_forward_transform(
    image: &ImageTensor,
    cfg: &SimplePipelineConfig,
) -> Result<ImageTensor, PreprocessError> {
    cfg.validate()?;
    let (c, h, w) = image.shape();
    if c != 3 {
        return Err(PreprocessError::Channels(c));
    }
    if h == 0 || w == 0 {
        return Err(PreprocessError::Empty);
    }
    let mut out = resize_bilinear(image, cfg.target_size, cfg.target_size);
    for (ch, mut plane) in out.0.axis_iter_mut(Axis(0)).enumerate() {
        let (m, s) = (cfg.per_channel_mean[ch], cfg.per_channel_std[ch]);
        plane.mapv_inplace(|v| (v - m) / s);
    }
    Ok(out)
}
