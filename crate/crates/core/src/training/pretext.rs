//! Supervised pretraining of the backbone (image category) and segmenter
//! (per-pixel category) branches on labelled synthetic data. This stands in
//! for the large-scale pretraining those components would normally get.

use ndarray::{Array2, ArrayD, Axis, Ix2, Ix4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SgdMomentum, TrainError};
use crate::datasets::SyntheticDataset;
use crate::image::ImageTensor;
use crate::models::{stack_images, Branch, Network};
use crate::nn::{Layer, Linear, Sequential};
use crate::preprocess::{simple_forward_transform, SimplePipelineConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretextConfig {
    pub epochs: usize,
    pub eta: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretextConfig {
    fn default() -> Self {
        PretextConfig {
            epochs: 4,
            eta: 0.01,
            gamma: 0.9,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Model-ready images with an image-level class and a per-pixel class map.
#[derive(Clone, Debug, Default)]
pub struct PretextData {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
    pub masks: Vec<Array2<u8>>,
}

impl PretextData {
    pub fn from_synthetic(
        ds: &SyntheticDataset,
        pipeline: &SimplePipelineConfig,
    ) -> Result<Self, TrainError> {
        if pipeline.target_size != ds.image_size {
            return Err(TrainError::InputSize {
                pipeline: pipeline.target_size,
                model: ds.image_size,
            });
        }
        let images = ds
            .images
            .iter()
            .zip(&ds.samples)
            .map(|(img, s)| {
                simple_forward_transform(img, pipeline).map_err(|e| TrainError::Data {
                    image_ref: s.image_ref.clone(),
                    message: e.to_string(),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(PretextData {
            images,
            labels: ds.categories(),
            masks: ds.masks(),
        })
    }
}

fn batches(n: usize, cfg: &PretextConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch as u64);
    idx.shuffle(&mut rng);
    idx.chunks(cfg.batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Softmax cross-entropy over rows of `logits`; returns the summed loss and
/// `softmax - onehot` per row.
fn softmax_xent(logits: &Array2<f32>, labels: &[usize]) -> (f64, Array2<f32>) {
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (mut row, &y) in grad.axis_iter_mut(Axis(0)).zip(labels) {
        let m = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
        loss -= (row[y].max(1e-12) as f64).ln();
        row[y] -= 1.0;
    }
    (loss, grad)
}

fn check_finite(loss: f64, step: usize) -> Result<(), TrainError> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(TrainError::Diverged { step, loss })
    }
}

/// Train the backbone through a temporary linear classifier on
/// `data.labels`. Returns the mean loss of each epoch.
pub fn pretrain_backbone(
    net: &mut Network<f32>,
    data: &PretextData,
    cfg: &PretextConfig,
) -> Result<Vec<f64>, TrainError> {
    let backbone = net.branch(Branch::Backbone).ok_or(crate::models::ModelError::NoBackbone)?;
    if data.images.is_empty() {
        return Err(TrainError::EmptyData("pretext"));
    }
    let feature_dim = net.config().backbone.as_ref().unwrap().feature_dim;
    let n_classes = data.labels.iter().max().unwrap() + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xB0B);
    // Linear on the raw features, as the regression head sees them. A ReLU
    // here lets the whole classifier die once every feature goes negative.
    let mut aux = Sequential::new("aux");
    aux.push("fc", Layer::Linear(Linear::new(feature_dim, n_classes, &mut rng)));

    let zeros = |s: &Sequential<f32>| -> Vec<ArrayD<f32>> {
        s.named_params()
            .into_iter()
            .map(|(_, t)| ArrayD::zeros(t.raw_dim()))
            .collect()
    };
    let mut bb_grads = zeros(backbone);
    let mut aux_grads = zeros(&aux);
    let mut bb_opt = SgdMomentum::new(cfg.eta, cfg.gamma, bb_grads.clone());
    let mut aux_opt = SgdMomentum::new(cfg.eta, cfg.gamma, aux_grads.clone());
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for idx in batches(data.images.len(), cfg, epoch) {
            let imgs: Vec<ImageTensor> = idx.iter().map(|&i| data.images[i].clone()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let x = stack_images::<f32>(&imgs).into_dyn();
            let backbone = net.branch(Branch::Backbone).unwrap();
            let (feats, bb_cache) = backbone.forward_train(&x);
            let (logits, aux_cache) = aux.forward_train(&feats);
            let logits = logits.into_dimensionality::<Ix2>().unwrap();
            let (loss, mut dlogits) = softmax_xent(&logits, &labels);
            step += 1;
            check_finite(loss, step)?;
            total += loss;
            dlogits /= idx.len() as f32;
            bb_grads.iter_mut().chain(aux_grads.iter_mut()).for_each(|g| g.fill(0.0));
            let dfeat = aux
                .backward(&aux_cache, dlogits.into_dyn(), Some(&mut aux_grads), true)
                .unwrap();
            backbone.backward(&bb_cache, dfeat, Some(&mut bb_grads), false);
            aux_opt.step(aux.params_mut(), &aux_grads, None);
            let backbone = net.branch_mut(Branch::Backbone).unwrap();
            bb_opt.step(backbone.params_mut(), &bb_grads, None);
        }
        history.push(total / data.images.len() as f64);
    }
    Ok(history)
}

/// Train the segmenter with per-pixel cross-entropy against `data.masks`.
/// Returns the mean per-pixel loss of each epoch.
pub fn pretrain_segmenter(
    net: &mut Network<f32>,
    data: &PretextData,
    cfg: &PretextConfig,
) -> Result<Vec<f64>, TrainError> {
    let seg = net
        .branch(Branch::Segmenter)
        .ok_or_else(|| TrainError::Config("model has no segmentation branch".into()))?;
    if data.images.is_empty() {
        return Err(TrainError::EmptyData("pretext"));
    }
    let n_classes = net.config().segmentation.as_ref().unwrap().n_classes;
    if data.masks.iter().flatten().any(|&m| m as usize >= n_classes) {
        return Err(TrainError::Config(format!(
            "mask labels exceed the segmenter's {n_classes} classes"
        )));
    }
    let mut grads: Vec<ArrayD<f32>> = seg
        .named_params()
        .into_iter()
        .map(|(_, t)| ArrayD::zeros(t.raw_dim()))
        .collect();
    let mut opt = SgdMomentum::new(cfg.eta, cfg.gamma, grads.clone());
    let upto = seg.layers.len() - 1;
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let mut pixels = 0usize;
        for idx in batches(data.images.len(), cfg, epoch) {
            let imgs: Vec<ImageTensor> = idx.iter().map(|&i| data.images[i].clone()).collect();
            let x = stack_images::<f32>(&imgs).into_dyn();
            let seg = net.branch(Branch::Segmenter).unwrap();
            let (logits, cache) = seg.forward_train_until(&x, upto);
            let logits = logits.into_dimensionality::<Ix4>().unwrap();
            let (n, c, h, w) = logits.dim();
            // [N, C, H, W] -> rows of [N*H*W, C]
            let rows = logits
                .permuted_axes([0, 2, 3, 1])
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((n * h * w, c))
                .unwrap();
            let labels: Vec<usize> = idx
                .iter()
                .flat_map(|&i| data.masks[i].iter().map(|&m| m as usize))
                .collect();
            let (loss, mut drows) = softmax_xent(&rows, &labels);
            step += 1;
            check_finite(loss, step)?;
            total += loss;
            pixels += n * h * w;
            drows /= (n * h * w) as f32;
            let dlogits = drows
                .into_shape_with_order((n, h, w, c))
                .unwrap()
                .permuted_axes([0, 3, 1, 2])
                .as_standard_layout()
                .into_owned();
            grads.iter_mut().for_each(|g| g.fill(0.0));
            seg.backward(&cache, dlogits.into_dyn(), Some(&mut grads), false);
            let seg = net.branch_mut(Branch::Segmenter).unwrap();
            opt.step(seg.params_mut(), &grads, None);
        }
        history.push(total / pixels as f64);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic, TargetFn};
    use crate::models::{ModelConfig, Variant};

    #[test]
    fn pretext_losses_fall() {
        let ds = generate_synthetic(64, 32, 11, TargetFn::TexturePlusCategory).unwrap();
        let data = PretextData::from_synthetic(&ds, &SimplePipelineConfig::identity(32)).unwrap();
        let mut net = Network::build(&ModelConfig::tiny(Variant::M3m), 1).unwrap();
        let cfg = PretextConfig {
            epochs: 6,
            ..Default::default()
        };
        let bb = pretrain_backbone(&mut net, &data, &cfg).unwrap();
        assert!(bb.last().unwrap() < bb.first().unwrap(), "{bb:?}");
        let seg = pretrain_segmenter(&mut net, &data, &cfg).unwrap();
        assert!(seg.last().unwrap() < seg.first().unwrap(), "{seg:?}");
    }

    #[test]
    fn memnet_has_nothing_to_pretrain() {
        let ds = generate_synthetic(4, 32, 1, TargetFn::TextureOnly).unwrap();
        let data = PretextData::from_synthetic(&ds, &SimplePipelineConfig::identity(32)).unwrap();
        let mut net = Network::build(&ModelConfig::tiny(Variant::Memnet), 1).unwrap();
        assert!(pretrain_backbone(&mut net, &data, &PretextConfig::default()).is_err());
        assert!(pretrain_segmenter(&mut net, &data, &PretextConfig::default()).is_err());
    }
}
