//! Momentum SGD on mean squared error with validation-Spearman early
//! stopping, hyperparameter sweeps and auxiliary pretraining of the
//! backbone and segmenter branches.

mod pretext;
mod sweep;

use std::io::Write;

use ndarray::{Array1, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::DatasetManifest;
use crate::eval::{mse, spearman};
use crate::image::ImageTensor;
use crate::models::{
    stack_images, CacheMode, Checkpoint, Gradients, ModelError, Network, TrainMeta,
};
use crate::nn::Scalar;
use crate::preprocess::{simple_forward_transform, PipelineConfig};
use crate::scoring::ImageSource;

pub use pretext::{pretrain_backbone, pretrain_segmenter, PretextConfig, PretextData};
pub use sweep::{sweep, write_curves_csv, SweepRun};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("empty {0} set")]
    EmptyData(&'static str),
    #[error("training needs the simple pipeline; the legacy ten-crop pipeline is inference-only")]
    LegacyPipeline,
    #[error("pipeline produces {pipeline}px inputs but the model expects {model}px")]
    InputSize { pipeline: usize, model: usize },
    #[error("cannot load `{image_ref}`: {message}")]
    Data { image_ref: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Evaluations without improvement before stopping; 0 disables early
    /// stopping.
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Evaluate every this many steps instead of once per epoch.
    #[serde(default)]
    pub eval_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta: 0.01,
            gamma: 0.9,
            batch_size: 32,
            max_epochs: 30,
            early_stop_patience: 5,
            seed: 0,
            eval_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(TrainError::Config(format!("eta {} must be >= 0", self.eta)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(TrainError::Config(format!("gamma {} must be in [0, 1)", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if self.eval_every == Some(0) {
            return Err(TrainError::Config("eval_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Classical momentum: `v <- gamma * v - eta * grad`, `w <- w + v`.
#[derive(Clone, Debug)]
pub struct SgdMomentum<T> {
    pub eta: T,
    pub gamma: T,
    velocity: Vec<ArrayD<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(eta: f64, gamma: f64, shapes: impl IntoIterator<Item = ArrayD<T>>) -> Self {
        SgdMomentum {
            eta: T::from_f64_lossy(eta),
            gamma: T::from_f64_lossy(gamma),
            velocity: shapes
                .into_iter()
                .map(|t| ArrayD::zeros(t.raw_dim()))
                .collect(),
        }
    }

    pub fn for_network(net: &Network<T>, eta: f64, gamma: f64) -> Self {
        Self::new(eta, gamma, net.zero_gradients().tensors)
    }

    /// Update every parameter whose `mask` entry is true (all when `None`).
    pub fn step(&mut self, params: Vec<&mut ArrayD<T>>, grads: &[ArrayD<T>], mask: Option<&[bool]>) {
        let (eta, gamma) = (self.eta, self.gamma);
        for (i, ((w, g), v)) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.velocity)
            .enumerate()
        {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            v.zip_mut_with(g, |v, &g| *v = gamma * *v - eta * g);
            *w += &*v;
        }
    }
}

/// Mean squared error and its gradient with respect to each prediction.
pub fn mse_loss<T: Scalar>(pred: &Array1<T>, target: &Array1<T>) -> (T, Array1<T>) {
    let n = T::from_usize(pred.len()).unwrap();
    let diff = pred - target;
    let loss = diff.iter().fold(T::zero(), |a, &d| a + d * d) / n;
    let two = T::one() + T::one();
    (loss, diff.mapv(|d| two * d / n))
}

/// Loss on a batch and the accumulated parameter gradients.
pub fn loss_and_gradients<T: Scalar>(
    net: &Network<T>,
    x: &ndarray::Array4<T>,
    y: &Array1<T>,
    grads: &mut Gradients<T>,
) -> Result<T, ModelError> {
    let (pred, cache) = net.forward_train(x, CacheMode::Trainable)?;
    let (loss, dout) = mse_loss(&pred, y);
    grads.zero();
    net.backward(&cache, &dout, Some(grads), false);
    Ok(loss)
}

/// Model-ready images with their target scores.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub image_refs: Vec<String>,
    pub images: Vec<ImageTensor>,
    pub targets: Vec<f64>,
}

impl TrainData {
    /// Load and preprocess every record once.
    pub fn from_manifest(
        manifest: &DatasetManifest,
        source: &dyn ImageSource,
        pipeline: &PipelineConfig,
    ) -> Result<Self, TrainError> {
        use rayon::prelude::*;
        let PipelineConfig::Simple(cfg) = pipeline else {
            return Err(TrainError::LegacyPipeline);
        };
        let images = manifest
            .records
            .par_iter()
            .map(|r| {
                let err = |message: String| TrainError::Data {
                    image_ref: r.image_ref.clone(),
                    message,
                };
                let img = source.load(&r.image_ref).map_err(|e| err(e.to_string()))?;
                simple_forward_transform(&img, cfg).map_err(|e| err(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TrainData {
            image_refs: manifest.records.iter().map(|r| r.image_ref.clone()).collect(),
            images,
            targets: manifest.scores(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> (ndarray::Array4<f32>, Array1<f32>) {
        let imgs: Vec<ImageTensor> = idx.iter().map(|&i| self.images[i].clone()).collect();
        let y = idx.iter().map(|&i| self.targets[i] as f32).collect();
        (stack_images(&imgs), y)
    }
}

/// Clipped predictions for already-preprocessed images.
pub fn predict(net: &Network<f32>, data: &TrainData, batch_size: usize) -> Result<Vec<f64>, ModelError> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.images.chunks(batch_size.max(1)) {
        out.extend(
            net.score_images(chunk)?
                .into_iter()
                .map(|v| (v as f64).clamp(0.0, 1.0)),
        );
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub epoch: usize,
    pub val_mse: f64,
    pub val_spearman: Option<f64>,
}

/// One line of the JSONL training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub step: usize,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_spearman: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// `(step, batch loss)` for every optimizer step.
    pub train_loss: Vec<(usize, f64)>,
    pub evals: Vec<EvalPoint>,
    pub best: Option<EvalPoint>,
    pub stopped_reason: StopReason,
}

impl TrainLog {
    /// Train and eval events interleaved in step order.
    pub fn events(&self) -> Vec<LogEvent> {
        let mut out = Vec::with_capacity(self.train_loss.len() + self.evals.len());
        let mut evals = self.evals.iter().peekable();
        let push_eval = |e: &EvalPoint, out: &mut Vec<LogEvent>| {
            out.push(LogEvent {
                step: e.step,
                kind: "eval".into(),
                loss: None,
                val_mse: Some(e.val_mse),
                val_spearman: e.val_spearman,
            })
        };
        for &(step, loss) in &self.train_loss {
            while let Some(e) = evals.next_if(|e| e.step < step) {
                push_eval(e, &mut out);
            }
            out.push(LogEvent {
                step,
                kind: "train".into(),
                loss: Some(loss),
                val_mse: None,
                val_spearman: None,
            });
        }
        for e in evals {
            push_eval(e, &mut out);
        }
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in self.events() {
            serde_json::to_writer(&mut out, &e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Tracks the best validation Spearman. Improvement must be strict, so
/// ties keep the earlier step; undefined ρ never counts as improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, step: usize, spearman: Option<f64>) -> StopDecision {
        let improved = match (spearman, self.best) {
            (Some(r), None) => !r.is_nan(),
            (Some(r), Some((_, b))) => r > b,
            (None, _) => false,
        };
        if improved {
            self.best = Some((step, spearman.unwrap()));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        StopDecision {
            improved,
            stop: self.patience > 0 && self.since_best >= self.patience,
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

pub struct TrainOutcome {
    /// Network from the best validation evaluation (the final one if no
    /// evaluation had a defined ρ).
    pub best: Network<f32>,
    pub last: Network<f32>,
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Validation hook: returns `(val_mse, val_spearman)` for the current model.
pub type Validator<'a> = dyn FnMut(&Network<f32>) -> Result<(f64, Option<f64>), TrainError> + 'a;

/// Train on preprocessed data, validating with `validate` once per epoch (or
/// every `eval_every` steps).
pub fn train_with_validator(
    mut net: Network<f32>,
    data: &TrainData,
    pipeline: &PipelineConfig,
    cfg: &TrainConfig,
    validate: &mut Validator<'_>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyData("training"));
    }
    if pipeline.model_input_size() != net.input_size() {
        return Err(TrainError::InputSize {
            pipeline: pipeline.model_input_size(),
            model: net.input_size(),
        });
    }
    let mask = net.trainable_mask();
    let mut opt = SgdMomentum::for_network(&net, cfg.eta, cfg.gamma);
    let mut grads = net.zero_gradients();
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut log = TrainLog {
        train_loss: Vec::new(),
        evals: Vec::new(),
        best: None,
        stopped_reason: StopReason::MaxEpochs,
    };
    let mut best_net: Option<Network<f32>> = None;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;

    'epochs: for epoch in 0..cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let n_batches = batches.len();
        for (b, idx) in batches.into_iter().enumerate() {
            let (x, y) = data.subset(idx);
            let loss = loss_and_gradients(&net, &x, &y, &mut grads)? as f64;
            step += 1;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { step, loss });
            }
            opt.step(net.params_mut(), &grads.tensors, Some(&mask));
            log.train_loss.push((step, loss));

            let due = match cfg.eval_every {
                Some(k) => step % k == 0,
                None => b + 1 == n_batches,
            };
            if due {
                let (val_mse, val_spearman) = validate(&net)?;
                let point = EvalPoint {
                    step,
                    epoch,
                    val_mse,
                    val_spearman,
                };
                log.evals.push(point);
                let d = stopper.observe(step, val_spearman);
                if d.improved {
                    log.best = Some(point);
                    best_net = Some(net.clone());
                }
                if d.stop {
                    log.stopped_reason = StopReason::EarlyStop;
                    break 'epochs;
                }
            }
        }
    }

    let best = best_net.unwrap_or_else(|| net.clone());
    let meta = match log.best {
        Some(p) => TrainMeta {
            epoch: p.epoch,
            step: p.step,
            val_spearman: p.val_spearman,
            seed: cfg.seed,
        },
        None => TrainMeta {
            epoch: cfg.max_epochs,
            step,
            val_spearman: None,
            seed: cfg.seed,
        },
    };
    let checkpoint = Checkpoint::from_network(&best, pipeline.clone(), meta);
    Ok(TrainOutcome {
        best,
        last: net,
        checkpoint,
        log,
    })
}

/// Validation by MSE and Spearman on a held-out set.
pub fn val_metrics(net: &Network<f32>, val: &TrainData) -> Result<(f64, Option<f64>), TrainError> {
    let preds = predict(net, val, 64)?;
    let m = mse(&preds, &val.targets).map_err(|_| TrainError::EmptyData("validation"))?;
    Ok((m, spearman(&preds, &val.targets).ok()))
}

/// Train on preprocessed data with early stopping on `val`.
pub fn train_data(
    net: Network<f32>,
    train: &TrainData,
    val: &TrainData,
    pipeline: &PipelineConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if val.is_empty() {
        return Err(TrainError::EmptyData("validation"));
    }
    train_with_validator(net, train, pipeline, cfg, &mut |n| val_metrics(n, val))
}

/// Load both manifests through `pipeline` and train.
pub fn train(
    net: Network<f32>,
    train: &DatasetManifest,
    val: &DatasetManifest,
    source: &dyn ImageSource,
    pipeline: &PipelineConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyData("training"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptyData("validation"));
    }
    let t = TrainData::from_manifest(train, source, pipeline)?;
    let v = TrainData::from_manifest(val, source, pipeline)?;
    train_data(net, &t, &v, pipeline, cfg)
}
