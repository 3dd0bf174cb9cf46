//! Synthetic shape images with a known memorability function.
//!
//! Each image holds 1 to 4 shapes of a single category drawn over a noisy
//! gray background. A latent contrast `c` in `[0, 1]` sets the shape
//! amplitude; the score depends on `c` and, for
//! [`TargetFn::TexturePlusCategory`], on the category.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{save_manifest, DatasetError, DatasetManifest, ManifestFormat, ManifestRecord};
use crate::image::ImageTensor;
use crate::scoring::MemorySource;

pub const SCORE_FLOOR: f64 = 0.2;
pub const SCORE_CEIL: f64 = 0.95;
const GENERATOR: &str = "synthetic-shapes-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetFn {
    TextureOnly,
    TexturePlusCategory,
}

impl TargetFn {
    pub fn name(self) -> &'static str {
        match self {
            TargetFn::TextureOnly => "texture_only",
            TargetFn::TexturePlusCategory => "texture_plus_category",
        }
    }

    pub fn formula(self) -> &'static str {
        match self {
            TargetFn::TextureOnly => "score = clip(0.2 + 0.75 * contrast, 0.2, 0.95)",
            TargetFn::TexturePlusCategory => {
                "score = clip(0.2 + 0.75 * (0.55 * contrast + offset[category]), 0.2, 0.95)"
            }
        }
    }
}

impl std::str::FromStr for TargetFn {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "texture_only" => Ok(TargetFn::TextureOnly),
            "texture_plus_category" => Ok(TargetFn::TexturePlusCategory),
            _ => Err(format!("unknown target function `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Whether offset `(dx, dy)` from the shape center lies inside a shape of
    /// radius `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            ShapeKind::Triangle => dy >= -r && dy <= 0.7 * r && dx.abs() <= 0.9 * (dy + r) / 1.7,
            ShapeKind::Cross => {
                (dx.abs() <= r && dy.abs() <= 0.3 * r) || (dy.abs() <= r && dx.abs() <= 0.3 * r)
            }
        }
    }
}

/// Per-category score offsets used by [`TargetFn::TexturePlusCategory`].
pub fn category_offsets() -> [f64; 4] {
    [0.0, 0.15, 0.3, 0.45]
}

pub fn target_score(target: TargetFn, contrast: f64, category: ShapeKind) -> f64 {
    let latent = match target {
        TargetFn::TextureOnly => contrast,
        TargetFn::TexturePlusCategory => 0.55 * contrast + category_offsets()[category.index()],
    };
    (SCORE_FLOOR + 0.75 * latent).clamp(SCORE_FLOOR, SCORE_CEIL)
}

/// Shape geometry in units of the image side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    /// +1 for shapes brighter than the background, -1 for darker.
    pub polarity: f64,
    pub tint: [f64; 3],
}

/// Every parameter needed to re-render one image and recompute its score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub image_ref: String,
    pub category: ShapeKind,
    pub contrast: f64,
    pub background: f64,
    pub noise_amplitude: f64,
    pub noise_seed: u64,
    pub shapes: Vec<ShapeSpec>,
    pub score: f64,
}

impl SyntheticSample {
    fn draw(index: usize, seed: u64, target: TargetFn) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let category = ShapeKind::ALL[rng.random_range(0..4)];
        let contrast: f64 = rng.random();
        let background = 0.35 + 0.3 * rng.random::<f64>();
        let noise_amplitude = 0.04 + 0.06 * rng.random::<f64>();
        let n_shapes = rng.random_range(1..=4);
        let shapes = (0..n_shapes)
            .map(|_| {
                let radius = 0.14 + 0.12 * rng.random::<f64>();
                let span = 1.0 - 2.0 * radius;
                ShapeSpec {
                    cx: radius + span * rng.random::<f64>(),
                    cy: radius + span * rng.random::<f64>(),
                    radius,
                    polarity: if rng.random::<bool>() { 1.0 } else { -1.0 },
                    tint: [0.0; 3].map(|_| 0.6 + 0.4 * rng.random::<f64>()),
                }
            })
            .collect();
        SyntheticSample {
            image_ref: format!("images/{index:05}.png"),
            category,
            contrast,
            background,
            noise_amplitude,
            noise_seed: rng.random(),
            shapes,
            score: target_score(target, contrast, category),
        }
    }

    /// Shape amplitude as a function of contrast.
    pub fn amplitude(&self) -> f64 {
        0.1 + 0.35 * self.contrast
    }

    /// Index of the topmost shape covering pixel `(y, x)`.
    fn shape_at(&self, y: usize, x: usize, size: usize) -> Option<usize> {
        let u = (x as f64 + 0.5) / size as f64;
        let v = (y as f64 + 0.5) / size as f64;
        self.shapes
            .iter()
            .rposition(|s| self.category.contains(u - s.cx, v - s.cy, s.radius))
    }
}

/// Render a sample at `size × size`. Pixel values are multiples of 1/255,
/// so PNG storage is lossless.
pub fn render_sample(sample: &SyntheticSample, size: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(sample.noise_seed);
    let mut data = Array3::<f32>::zeros((3, size, size));
    let amp = sample.amplitude();
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let noise = sample.noise_amplitude * (2.0 * rng.random::<f64>() - 1.0);
                let mut v = sample.background + noise;
                if let Some(k) = sample.shape_at(y, x, size) {
                    let s = &sample.shapes[k];
                    v += s.polarity * amp * s.tint[c];
                }
                data[[c, y, x]] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    let mut img = ImageTensor::new(data);
    img.quantize_u8();
    img
}

/// Per-pixel class map: 0 for background, `category + 1` inside shapes.
pub fn render_mask(sample: &SyntheticSample, size: usize) -> Array2<u8> {
    Array2::from_shape_fn((size, size), |(y, x)| {
        sample
            .shape_at(y, x, size)
            .map_or(0, |_| sample.category.index() as u8 + 1)
    })
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<ImageTensor>,
    pub samples: Vec<SyntheticSample>,
    pub image_size: usize,
    pub target: TargetFn,
}

impl SyntheticDataset {
    pub fn categories(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.category.index()).collect()
    }

    pub fn masks(&self) -> Vec<Array2<u8>> {
        self.samples
            .iter()
            .map(|s| render_mask(s, self.image_size))
            .collect()
    }

    pub fn memory_source(&self) -> MemorySource {
        let mut src = MemorySource::default();
        for (s, img) in self.samples.iter().zip(&self.images) {
            src.insert(s.image_ref.clone(), img.clone());
        }
        src
    }

    /// Recover generation parameters from manifest metadata.
    pub fn samples_from_metadata(
        meta: &serde_json::Value,
    ) -> Result<(usize, TargetFn, Vec<SyntheticSample>), DatasetError> {
        #[derive(Deserialize)]
        struct Meta {
            image_size: usize,
            target_fn: TargetFn,
            samples: Vec<SyntheticSample>,
        }
        let m: Meta = serde_json::from_value(meta.clone())
            .map_err(|e| DatasetError::Generator(format!("bad synthetic metadata: {e}")))?;
        Ok((m.image_size, m.target_fn, m.samples))
    }

    /// Re-render the records of a generated manifest (or any split of one)
    /// from its metadata, in manifest order.
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self, DatasetError> {
        let meta = manifest
            .metadata
            .as_ref()
            .ok_or_else(|| DatasetError::Generator("manifest has no synthetic metadata".into()))?;
        let (image_size, target, all) = Self::samples_from_metadata(meta)?;
        let by_ref: std::collections::HashMap<&str, &SyntheticSample> =
            all.iter().map(|s| (s.image_ref.as_str(), s)).collect();
        let samples = manifest
            .records
            .iter()
            .map(|r| {
                by_ref.get(r.image_ref.as_str()).map(|s| (*s).clone()).ok_or_else(|| {
                    DatasetError::Generator(format!("`{}` is not in the metadata", r.image_ref))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let images = samples
            .par_iter()
            .map(|s| render_sample(s, image_size))
            .collect();
        Ok(SyntheticDataset {
            manifest: manifest.clone(),
            images,
            samples,
            image_size,
            target,
        })
    }
}

pub fn generate_synthetic(
    n: usize,
    image_size: usize,
    seed: u64,
    target: TargetFn,
) -> Result<SyntheticDataset, DatasetError> {
    if n == 0 {
        return Err(DatasetError::Generator("n must be at least 1".into()));
    }
    if image_size < 32 {
        return Err(DatasetError::Generator(format!(
            "image_size {image_size} is below the 32-pixel minimum"
        )));
    }
    let samples: Vec<SyntheticSample> = (0..n)
        .map(|i| SyntheticSample::draw(i, seed, target))
        .collect();
    let images: Vec<ImageTensor> = samples
        .par_iter()
        .map(|s| render_sample(s, image_size))
        .collect();
    let records = samples
        .iter()
        .map(|s| ManifestRecord::new(s.image_ref.clone(), s.score, format!("synthetic-{}", target.name())))
        .collect();
    let metadata = serde_json::json!({
        "generator": GENERATOR,
        "target_fn": target,
        "formula": target.formula(),
        "category_offsets": category_offsets(),
        "categories": ShapeKind::ALL,
        "amplitude": "0.1 + 0.35 * contrast",
        "image_size": image_size,
        "seed": seed,
        "samples": samples,
    });
    Ok(SyntheticDataset {
        manifest: DatasetManifest {
            records,
            seed,
            metadata: Some(metadata),
        },
        images,
        samples,
        image_size,
        target,
    })
}

/// Write PNGs under `dir/images/`, `dir/manifest.csv` and its metadata
/// sidecar. Returns the manifest path.
pub fn write_synthetic(dataset: &SyntheticDataset, dir: &Path) -> Result<PathBuf, DatasetError> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| DatasetError::Write {
        path: images_dir.display().to_string(),
        message: e.to_string(),
    })?;
    dataset
        .samples
        .par_iter()
        .zip(&dataset.images)
        .try_for_each(|(s, img)| {
            let path = dir.join(&s.image_ref);
            img.save_png(&path).map_err(|e| DatasetError::Write {
                path: path.display().to_string(),
                message: e.to_string(),
            })
        })?;
    let manifest_path = dir.join("manifest.csv");
    save_manifest(&dataset.manifest, &manifest_path, ManifestFormat::Csv)?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scores_within_range() {
        let d = generate_synthetic(2000, 32, 1, TargetFn::TextureOnly).unwrap();
        assert!(d
            .manifest
            .records
            .iter()
            .all(|r| (SCORE_FLOOR..=SCORE_CEIL).contains(&r.score)));
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_synthetic(12, 32, 5, TargetFn::TexturePlusCategory).unwrap();
        let b = generate_synthetic(12, 32, 5, TargetFn::TexturePlusCategory).unwrap();
        assert_eq!(a.manifest, b.manifest);
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.encode_png().unwrap(), y.encode_png().unwrap());
        }
        let c = generate_synthetic(12, 32, 6, TargetFn::TexturePlusCategory).unwrap();
        assert_ne!(a.manifest, c.manifest);
    }

    #[test]
    fn regenerate_from_metadata() {
        let d = generate_synthetic(20, 40, 3, TargetFn::TexturePlusCategory).unwrap();
        let (size, target, samples) =
            SyntheticDataset::samples_from_metadata(d.manifest.metadata.as_ref().unwrap()).unwrap();
        for ((s, img), rec) in samples.iter().zip(&d.images).zip(&d.manifest.records) {
            assert_eq!(&render_sample(s, size), img);
            assert_eq!(target_score(target, s.contrast, s.category), rec.score);
        }
    }

    #[test]
    fn masks_mark_shape_pixels_with_category() {
        let d = generate_synthetic(10, 32, 2, TargetFn::TextureOnly).unwrap();
        for (s, m) in d.samples.iter().zip(d.masks()) {
            let labels: std::collections::BTreeSet<u8> = m.iter().copied().collect();
            assert!(labels.contains(&(s.category.index() as u8 + 1)));
            assert!(labels.iter().all(|&l| l == 0 || l == s.category.index() as u8 + 1));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(generate_synthetic(0, 32, 0, TargetFn::TextureOnly).is_err());
        assert!(generate_synthetic(4, 16, 0, TargetFn::TextureOnly).is_err());
    }
}
