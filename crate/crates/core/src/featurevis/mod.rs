//! Activation maximization and dataset search for individual filters.

mod grid;

use ndarray::{Array3, Array4, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::DatasetManifest;
use crate::image::ImageTensor;
use crate::models::{stack_images, LayerAddress, ModelError, Network};
use crate::preprocess::{legacy_crops, simple_forward_transform, PipelineConfig};
use crate::scoring::ImageSource;

pub use grid::{render_grid, GridLayout, GRID_COLUMNS};

/// Consecutive zero-gradient steps tolerated before giving up.
pub const DEAD_FILTER_STEPS: usize = 50;
const MAX_HALVINGS: usize = 30;

#[derive(Debug, Error)]
pub enum VisError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("filter {filter} out of range: layer `{layer}` has {channels} channels")]
    FilterIndex {
        layer: String,
        filter: usize,
        channels: usize,
    },
    #[error("dead filter: zero gradient for more than {DEAD_FILTER_STEPS} consecutive steps (step {step})")]
    DeadFilter { step: usize },
    #[error("invalid visualization config: {0}")]
    Config(String),
    #[error("cannot load `{image_ref}`: {message}")]
    Data { image_ref: String, message: String },
    #[error("cannot write {path}: {message}")]
    Write { path: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub layer_id: String,
    pub filter_index: usize,
}

impl FeatureSpec {
    pub fn new(layer_id: impl Into<String>, filter_index: usize) -> Self {
        FeatureSpec {
            layer_id: layer_id.into(),
            filter_index,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisConfig {
    pub steps: usize,
    /// Initial step length for the normalized gradient. Zero leaves the
    /// starting image untouched.
    pub step_size: f64,
    /// Maximum random shift in pixels applied before each gradient.
    pub jitter: usize,
    /// Pull toward mid-gray, scaled by the step length.
    pub l2_decay: f64,
    pub seed: u64,
    /// Starting noise is uniform on `[0, init_scale]`.
    pub init_scale: f64,
    /// Per-channel normalization applied between pixels and the model.
    pub input_mean: [f32; 3],
    pub input_std: [f32; 3],
}

impl Default for VisConfig {
    fn default() -> Self {
        VisConfig {
            steps: 200,
            step_size: 0.05,
            jitter: 1,
            l2_decay: 0.01,
            seed: 0,
            init_scale: 0.1,
            input_mean: [0.0; 3],
            input_std: [1.0; 3],
        }
    }
}

impl VisConfig {
    pub fn validate(&self) -> Result<(), VisError> {
        if self.steps == 0 {
            return Err(VisError::Config("steps must be at least 1".into()));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(VisError::Config("step_size must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.init_scale) {
            return Err(VisError::Config("init_scale must be in [0, 1]".into()));
        }
        if self.input_std.iter().any(|&s| s <= 0.0) {
            return Err(VisError::Config("input_std must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct VisResult {
    pub image: ImageTensor,
    /// Objective of the current image before the first step and after each
    /// step.
    pub trace: Vec<f64>,
}

/// What the JSON sidecar records for each visualized filter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisRecord {
    pub layer_id: String,
    pub filter_index: usize,
    pub final_activation: f64,
    pub initial_activation: f64,
}

fn check_spec(net: &Network<f32>, spec: &FeatureSpec) -> Result<LayerAddress, VisError> {
    let addr = net.resolve_layer(&spec.layer_id)?;
    let s = net.input_size();
    let probe = Array4::<f32>::zeros((1, 3, s, s));
    let channels = net.layer_activation(&probe, addr)?.shape()[1];
    if spec.filter_index >= channels {
        return Err(VisError::FilterIndex {
            layer: spec.layer_id.clone(),
            filter: spec.filter_index,
            channels,
        });
    }
    Ok(addr)
}

/// Mean of channel `filter` for each batch element (spatial mean for
/// feature maps, the value itself for vectors).
fn filter_means(act: &ArrayD<f32>, filter: usize) -> Vec<f64> {
    act.axis_iter(Axis(0))
        .map(|a| {
            let ch = a.index_axis(Axis(0), filter);
            ch.iter().map(|&v| v as f64).sum::<f64>() / ch.len() as f64
        })
        .collect()
}

struct Objective<'a> {
    net: &'a Network<f32>,
    addr: LayerAddress,
    filter: usize,
    cfg: &'a VisConfig,
}

impl Objective<'_> {
    fn input(&self, x: &Array3<f32>) -> Array4<f32> {
        let mut z = x.clone();
        for (c, mut plane) in z.axis_iter_mut(Axis(0)).enumerate() {
            let (m, s) = (self.cfg.input_mean[c], self.cfg.input_std[c]);
            plane.mapv_inplace(|v| (v - m) / s);
        }
        z.insert_axis(Axis(0))
    }

    fn value(&self, x: &Array3<f32>) -> Result<f64, VisError> {
        let act = self.net.layer_activation(&self.input(x), self.addr)?;
        Ok(filter_means(&act, self.filter)[0])
    }

    fn gradient(&self, x: &Array3<f32>) -> Result<Array3<f32>, VisError> {
        let filter = self.filter;
        let (_, g) = self.net.layer_activation_grad(&self.input(x), self.addr, |act| {
            let mut seed = ArrayD::zeros(act.raw_dim());
            let per = act.len() / act.shape()[0] / act.shape()[1];
            seed.index_axis_mut(Axis(1), filter)
                .fill(1.0 / per as f32);
            seed
        })?;
        let mut g = g.index_axis_move(Axis(0), 0);
        for (c, mut plane) in g.axis_iter_mut(Axis(0)).enumerate() {
            plane /= self.cfg.input_std[c];
        }
        Ok(g)
    }
}

/// Shift an image by `(dy, dx)` with wrap-around.
fn roll(x: &Array3<f32>, dy: isize, dx: isize) -> Array3<f32> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h, w), |(k, i, j)| {
        let si = (i as isize - dy).rem_euclid(h as isize) as usize;
        let sj = (j as isize - dx).rem_euclid(w as isize) as usize;
        x[[k, si, sj]]
    })
}

/// Gradient ascent on the input to maximize the mean activation of one
/// filter. Each step moves along the RMS-normalized gradient; a candidate that
/// lowers the objective halves the step and is retried, and if no length
/// helps the image is kept. The trace therefore never decreases, and each
/// entry is a fresh evaluation of the (unjittered) current image.
pub fn activation_maximize(
    net: &Network<f32>,
    spec: &FeatureSpec,
    cfg: &VisConfig,
) -> Result<VisResult, VisError> {
    cfg.validate()?;
    let addr = check_spec(net, spec)?;
    let obj = Objective {
        net,
        addr,
        filter: spec.filter_index,
        cfg,
    };
    let s = net.input_size();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = Array3::from_shape_fn((3, s, s), |_| (cfg.init_scale * rng.random::<f64>()) as f32);
    let mut current = obj.value(&x)?;
    let mut trace = vec![current];
    let mut step = cfg.step_size;
    let mut zero_run = 0;
    let j = cfg.jitter as i64;

    for t in 0..cfg.steps {
        let (dy, dx) = if j > 0 {
            (rng.random_range(-j..=j) as isize, rng.random_range(-j..=j) as isize)
        } else {
            (0, 0)
        };
        let g = roll(&obj.gradient(&roll(&x, dy, dx))?, -dy, -dx);
        let rms = (g.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / g.len() as f64).sqrt();
        if rms == 0.0 {
            zero_run += 1;
            if zero_run > DEAD_FILTER_STEPS {
                return Err(VisError::DeadFilter { step: t + 1 });
            }
            trace.push(current);
            continue;
        }
        zero_run = 0;
        for _ in 0..MAX_HALVINGS {
            let (st, decay) = (step as f32, cfg.l2_decay as f32);
            let cand = ndarray::Zip::from(&x)
                .and(&g)
                .map_collect(|&xv, &gv| {
                    (xv + st * (gv / rms as f32 - decay * (xv - 0.5))).clamp(0.0, 1.0)
                });
            let v = obj.value(&cand)?;
            if v >= current {
                x = cand;
                current = v;
                break;
            }
            step /= 2.0;
        }
        trace.push(current);
    }
    Ok(VisResult {
        image: ImageTensor::new(x),
        trace,
    })
}

/// Model-ready tensor used for dataset search: the simple transform, or the
/// center crop of the legacy pipeline.
fn model_input(image: &ImageTensor, pipeline: &PipelineConfig) -> Result<ImageTensor, String> {
    match pipeline {
        PipelineConfig::Simple(c) => simple_forward_transform(image, c).map_err(|e| e.to_string()),
        PipelineConfig::Legacy(c) => legacy_crops(image, c)
            .map(|mut crops| crops.swap_remove(4))
            .map_err(|e| e.to_string()),
    }
}

/// The `k` records whose images most activate the filter, descending; equal
/// activations keep manifest order.
pub fn max_activating_images(
    net: &Network<f32>,
    spec: &FeatureSpec,
    manifest: &DatasetManifest,
    source: &dyn ImageSource,
    pipeline: &PipelineConfig,
    k: usize,
) -> Result<Vec<(String, f64)>, VisError> {
    if k == 0 {
        return Err(VisError::Config("k must be at least 1".into()));
    }
    if manifest.is_empty() {
        return Err(VisError::Config("empty manifest".into()));
    }
    let addr = check_spec(net, spec)?;
    let mut scored = Vec::with_capacity(manifest.len());
    for chunk in manifest.records.chunks(32) {
        let inputs = chunk
            .iter()
            .map(|r| {
                let err = |message| VisError::Data {
                    image_ref: r.image_ref.clone(),
                    message,
                };
                let img = source.load(&r.image_ref).map_err(|e| err(e.to_string()))?;
                model_input(&img, pipeline).map_err(err)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let act = net.layer_activation(&stack_images(&inputs), addr)?;
        let means = filter_means(&act, spec.filter_index);
        scored.extend(chunk.iter().map(|r| r.image_ref.clone()).zip(means));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.truncate(k);
    Ok(scored)
}

/// Mean activation of one filter for a single model-ready image.
pub fn filter_activation(
    net: &Network<f32>,
    spec: &FeatureSpec,
    image: &ImageTensor,
) -> Result<f64, VisError> {
    let addr = check_spec(net, spec)?;
    let act = net.layer_activation(&stack_images(std::slice::from_ref(image)), addr)?;
    Ok(filter_means(&act, spec.filter_index)[0])
}
