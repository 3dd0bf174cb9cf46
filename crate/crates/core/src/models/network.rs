use ndarray::{concatenate, s, Array1, Array4, ArrayD, Axis, Ix2, Ix4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, Variant};
use super::ModelError;
use crate::image::ImageTensor;
use crate::nn::{Conv2d, Layer, Linear, ResidualBlock, Scalar, Sequential, SequentialCache};

/// Named sub-graphs of a model, in parameter order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Trunk,
    Backbone,
    Segmenter,
    Downscaler,
    Head,
}

impl Branch {
    pub const ALL: [Branch; 5] = [
        Branch::Trunk,
        Branch::Backbone,
        Branch::Segmenter,
        Branch::Downscaler,
        Branch::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Trunk => "trunk",
            Branch::Backbone => "backbone",
            Branch::Segmenter => "segmenter",
            Branch::Downscaler => "downscaler",
            Branch::Head => "head",
        }
    }

    fn from_name(s: &str) -> Option<Branch> {
        Branch::ALL.into_iter().find(|b| b.name() == s)
    }

    /// Branches that stand in for pretrained components and are excluded from
    /// updates when the model is frozen.
    pub fn freezable(self) -> bool {
        matches!(self, Branch::Backbone | Branch::Segmenter)
    }
}

/// A resolved `branch.layer` address.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerAddress {
    pub branch: Branch,
    pub index: usize,
}

/// One gradient buffer per parameter tensor, in [`Network::named_params`] order.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub tensors: Vec<ArrayD<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zero(&mut self) {
        for t in &mut self.tensors {
            t.fill(T::zero());
        }
    }
}

/// Which branches keep activation caches during a training forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheMode {
    /// Skip caches for frozen branches (they are never back-propagated).
    Trainable,
    /// Cache everything, needed for input gradients.
    All,
}

#[derive(Debug)]
pub struct NetworkCache<T> {
    trunk: SequentialCache<T>,
    backbone: Option<SequentialCache<T>>,
    segmenter: Option<SequentialCache<T>>,
    downscaler: Option<SequentialCache<T>>,
    head: SequentialCache<T>,
    widths: [usize; 3],
}

/// A differentiable scoring model built from a [`ModelConfig`].
#[derive(Clone, Debug)]
pub struct Network<T> {
    config: ModelConfig,
    trunk: Sequential<T>,
    backbone: Option<Sequential<T>>,
    segmenter: Option<Sequential<T>>,
    downscaler: Option<Sequential<T>>,
    head: Sequential<T>,
}

impl<T: Scalar> Network<T> {
    /// Deterministic construction: He fan-in normal weights and zero biases
    /// drawn from a ChaCha stream seeded with `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut trunk = Sequential::new("trunk");
        let mut ch = 3;
        let c = &config.conv;
        for i in 0..c.n_conv_layers() {
            let k = c.kernel_sizes[i];
            trunk.push(
                format!("conv{i}"),
                Layer::Conv(Conv2d::new(ch, c.channels[i], k, c.strides[i], k / 2, &mut rng)),
            );
            trunk.push(format!("relu{i}"), Layer::Relu);
            if c.pooling[i] {
                trunk.push(format!("pool{i}"), Layer::MaxPool2);
            }
            ch = c.channels[i];
        }
        trunk.push("flatten", Layer::Flatten);

        let backbone = config.backbone.as_ref().map(|b| {
            let mut seq = Sequential::new("backbone");
            seq.push(
                "stem",
                Layer::Conv(Conv2d::new(3, b.base_channels, 3, 1, 1, &mut rng)),
            );
            seq.push("stem_relu", Layer::Relu);
            seq.push("stem_pool", Layer::MaxPool2);
            let mut ch = b.base_channels;
            let mut idx = 0;
            // No normalization layers, so each residual branch starts scaled
            // down by 1/sqrt(blocks) to keep the sum's variance bounded.
            let branch_scale = T::from_f64_lossy(1.0 / (b.n_blocks().max(1) as f64).sqrt());
            for (stage, &blocks) in b.stage_plan().iter().enumerate() {
                let out = b.base_channels << stage;
                for j in 0..blocks {
                    let stride = if stage > 0 && j == 0 { 2 } else { 1 };
                    let mut block = ResidualBlock::new(ch, out, stride, &mut rng);
                    block.conv2.weight.mapv_inplace(|w| w * branch_scale);
                    seq.push(format!("block{idx}"), Layer::Residual(block));
                    ch = out;
                    idx += 1;
                }
            }
            seq.push("gap", Layer::GlobalAvgPool);
            seq.push("fc", Layer::Linear(Linear::new(ch, b.feature_dim, &mut rng)));
            seq
        });

        let (segmenter, downscaler) = match &config.segmentation {
            Some(sc) => {
                let mut seg = Sequential::new("segmenter");
                let mut ch = 3;
                for (i, &out) in sc.classifier_channels.iter().enumerate() {
                    seg.push(format!("conv{i}"), Layer::Conv(Conv2d::new(ch, out, 3, 1, 1, &mut rng)));
                    seg.push(format!("relu{i}"), Layer::Relu);
                    ch = out;
                }
                seg.push(
                    "classifier",
                    Layer::Conv(Conv2d::new(ch, sc.n_classes, 1, 1, 0, &mut rng)),
                );
                seg.push("softmax", Layer::ChannelSoftmax);

                let mut down = Sequential::new("downscaler");
                let mut ch = sc.n_classes;
                for (i, &out) in sc.downscaler_channels.iter().enumerate() {
                    down.push(format!("conv{i}"), Layer::Conv(Conv2d::new(ch, out, 3, 1, 1, &mut rng)));
                    down.push(format!("relu{i}"), Layer::Relu);
                    down.push(format!("pool{i}"), Layer::MaxPool2);
                    ch = out;
                }
                down.push("flatten", Layer::Flatten);
                (Some(seg), Some(down))
            }
            None => (None, None),
        };

        let widths = if config.variant == Variant::Memnet {
            &config.conv.fc_widths
        } else {
            &config.head_widths
        };
        let mut head = Sequential::new("head");
        let mut width = config.head_input_width();
        for (i, &out) in widths.iter().enumerate() {
            head.push(format!("fc{i}"), Layer::Linear(Linear::new(width, out, &mut rng)));
            if i + 1 < widths.len() {
                head.push(format!("relu{i}"), Layer::Relu);
            }
            width = out;
        }
        head.push("sigmoid", Layer::Sigmoid);

        Ok(Network {
            config: config.clone(),
            trunk,
            backbone,
            segmenter,
            downscaler,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn input_size(&self) -> usize {
        self.config.input_size
    }

    pub fn is_frozen(&self) -> bool {
        self.config.backbone.as_ref().is_some_and(|b| b.frozen)
    }

    /// Exclude (or re-include) the backbone and segmenter from updates.
    /// Forward outputs are unaffected.
    pub fn set_frozen(&mut self, frozen: bool) -> Result<(), ModelError> {
        match self.config.backbone.as_mut() {
            Some(b) => {
                b.frozen = frozen;
                Ok(())
            }
            None => Err(ModelError::NoBackbone),
        }
    }

    pub fn branch(&self, branch: Branch) -> Option<&Sequential<T>> {
        match branch {
            Branch::Trunk => Some(&self.trunk),
            Branch::Backbone => self.backbone.as_ref(),
            Branch::Segmenter => self.segmenter.as_ref(),
            Branch::Downscaler => self.downscaler.as_ref(),
            Branch::Head => Some(&self.head),
        }
    }

    pub fn branch_mut(&mut self, branch: Branch) -> Option<&mut Sequential<T>> {
        match branch {
            Branch::Trunk => Some(&mut self.trunk),
            Branch::Backbone => self.backbone.as_mut(),
            Branch::Segmenter => self.segmenter.as_mut(),
            Branch::Downscaler => self.downscaler.as_mut(),
            Branch::Head => Some(&mut self.head),
        }
    }

    fn branches(&self) -> impl Iterator<Item = (Branch, &Sequential<T>)> {
        Branch::ALL
            .into_iter()
            .filter_map(move |b| self.branch(b).map(|s| (b, s)))
    }

    pub fn named_params(&self) -> Vec<(String, &ArrayD<T>)> {
        self.branches().flat_map(|(_, s)| s.named_params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ArrayD<T>> {
        let mut out = self.trunk.params_mut();
        for s in [&mut self.backbone, &mut self.segmenter, &mut self.downscaler]
            .into_iter()
            .flatten()
        {
            out.extend(s.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Which parameter tensors the optimizer may update.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let frozen = self.is_frozen();
        self.branches()
            .flat_map(|(b, s)| {
                let trainable = !(frozen && b.freezable());
                std::iter::repeat_n(trainable, s.param_count())
            })
            .collect()
    }

    /// Parameter-index range of each present branch.
    pub fn branch_param_ranges(&self) -> Vec<(Branch, std::ops::Range<usize>)> {
        let mut off = 0;
        self.branches()
            .map(|(b, s)| {
                let r = off..off + s.param_count();
                off = r.end;
                (b, r)
            })
            .collect()
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        Gradients {
            tensors: self
                .named_params()
                .into_iter()
                .map(|(_, t)| ArrayD::zeros(t.raw_dim()))
                .collect(),
        }
    }

    pub fn head_input_width(&self) -> usize {
        match &self.head.layers[0].1 {
            Layer::Linear(l) => l.inputs(),
            _ => unreachable!("head starts with a linear layer"),
        }
    }

    /// Same weights converted to another element type.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let mut out = Network::<U>::build(&self.config, 0).expect("config already validated");
        for (dst, (_, src)) in out.params_mut().into_iter().zip(self.named_params()) {
            *dst = src.mapv(|v| U::from_f64_lossy(v.to_f64().unwrap()));
        }
        out
    }

    fn check_input(&self, x: &Array4<T>) -> Result<(), ModelError> {
        let (n, c, h, w) = x.dim();
        let s = self.config.input_size;
        if n == 0 || c != 3 || h != s || w != s {
            return Err(ModelError::InputShape {
                expected: (3, s, s),
                found: (c, h, w),
            });
        }
        Ok(())
    }

    fn concat(parts: &[ArrayD<T>]) -> ArrayD<T> {
        let views: Vec<_> = parts
            .iter()
            .map(|p| p.view().into_dimensionality::<Ix2>().unwrap())
            .collect();
        concatenate(Axis(1), &views).unwrap().into_dyn()
    }

    fn features(&self, x: &ArrayD<T>) -> ArrayD<T> {
        let mut parts = vec![self.trunk.forward(x)];
        if let Some(b) = &self.backbone {
            parts.push(b.forward(x));
        }
        if let (Some(seg), Some(down)) = (&self.segmenter, &self.downscaler) {
            parts.push(down.forward(&seg.forward(x)));
        }
        Self::concat(&parts)
    }

    /// Inference: one raw score in `(0, 1)` per batch element.
    pub fn forward(&self, x: &Array4<T>) -> Result<Array1<T>, ModelError> {
        self.check_input(x)?;
        let xd = x.clone().into_dyn();
        let out = self.head.forward(&self.features(&xd));
        Ok(out.index_axis_move(Axis(1), 0).into_dimensionality().unwrap())
    }

    pub fn forward_train(
        &self,
        x: &Array4<T>,
        mode: CacheMode,
    ) -> Result<(Array1<T>, NetworkCache<T>), ModelError> {
        self.check_input(x)?;
        let xd = x.clone().into_dyn();
        let (feats, cache_parts) = self.features_train(&xd, mode);
        let (out, head) = self.head.forward_train(&feats);
        let (trunk, backbone, segmenter, downscaler, widths) = cache_parts;
        Ok((
            out.index_axis_move(Axis(1), 0).into_dimensionality().unwrap(),
            NetworkCache {
                trunk,
                backbone,
                segmenter,
                downscaler,
                head,
                widths,
            },
        ))
    }

    #[allow(clippy::type_complexity)]
    fn features_train(
        &self,
        x: &ArrayD<T>,
        mode: CacheMode,
    ) -> (
        ArrayD<T>,
        (
            SequentialCache<T>,
            Option<SequentialCache<T>>,
            Option<SequentialCache<T>>,
            Option<SequentialCache<T>>,
            [usize; 3],
        ),
    ) {
        let keep_frozen = mode == CacheMode::All || !self.is_frozen();
        let (t, trunk_cache) = self.trunk.forward_train(x);
        let mut widths = [t.shape()[1], 0, 0];
        let mut parts = vec![t];
        let mut bb_cache = None;
        if let Some(b) = &self.backbone {
            let out = if keep_frozen {
                let (o, c) = b.forward_train(x);
                bb_cache = Some(c);
                o
            } else {
                b.forward(x)
            };
            widths[1] = out.shape()[1];
            parts.push(out);
        }
        let mut seg_cache = None;
        let mut down_cache = None;
        if let (Some(seg), Some(down)) = (&self.segmenter, &self.downscaler) {
            let probs = if keep_frozen {
                let (o, c) = seg.forward_train(x);
                seg_cache = Some(c);
                o
            } else {
                seg.forward(x)
            };
            let (out, c) = down.forward_train(&probs);
            down_cache = Some(c);
            widths[2] = out.shape()[1];
            parts.push(out);
        }
        (
            Self::concat(&parts),
            (trunk_cache, bb_cache, seg_cache, down_cache, widths),
        )
    }

    /// Back-propagate `dout` (gradient w.r.t. each raw score). Parameter
    /// gradients of trainable branches are accumulated into `grads`; the
    /// input gradient is returned when requested (needs [`CacheMode::All`]).
    pub fn backward(
        &self,
        cache: &NetworkCache<T>,
        dout: &Array1<T>,
        grads: Option<&mut Gradients<T>>,
        need_input: bool,
    ) -> Option<Array4<T>> {
        let n = dout.len();
        let dy = dout.clone().into_shape_with_order((n, 1)).unwrap().into_dyn();
        let mut slots = self.split_grads(grads);
        let dfeat = self
            .head
            .backward(&cache.head, dy, slots.remove(&Branch::Head), true)
            .unwrap();
        self.backward_features(cache, dfeat, slots, need_input)
    }

    fn split_grads<'a>(
        &self,
        grads: Option<&'a mut Gradients<T>>,
    ) -> std::collections::HashMap<Branch, &'a mut [ArrayD<T>]> {
        let mut out = std::collections::HashMap::new();
        let Some(g) = grads else { return out };
        let frozen = self.is_frozen();
        let mut rest: &'a mut [ArrayD<T>] = &mut g.tensors;
        for (b, range) in self.branch_param_ranges() {
            let (mine, tail) = rest.split_at_mut(range.len());
            rest = tail;
            if !(frozen && b.freezable()) {
                out.insert(b, mine);
            }
        }
        out
    }

    fn backward_features(
        &self,
        cache: &NetworkCache<T>,
        dfeat: ArrayD<T>,
        mut slots: std::collections::HashMap<Branch, &mut [ArrayD<T>]>,
        need_input: bool,
    ) -> Option<Array4<T>> {
        let df = dfeat.into_dimensionality::<Ix2>().unwrap();
        let [w0, w1, w2] = cache.widths;
        let mut input_grads: Vec<ArrayD<T>> = Vec::new();

        let d_trunk = df.slice(s![.., 0..w0]).to_owned().into_dyn();
        if let Some(g) = self
            .trunk
            .backward(&cache.trunk, d_trunk, slots.remove(&Branch::Trunk), need_input)
        {
            input_grads.push(g);
        }
        if let (Some(b), Some(c)) = (&self.backbone, &cache.backbone) {
            let d = df.slice(s![.., w0..w0 + w1]).to_owned().into_dyn();
            if let Some(g) = b.backward(c, d, slots.remove(&Branch::Backbone), need_input) {
                input_grads.push(g);
            }
        }
        if let (Some(down), Some(dc)) = (&self.downscaler, &cache.downscaler) {
            let d = df.slice(s![.., w0 + w1..w0 + w1 + w2]).to_owned().into_dyn();
            let seg_cache = cache.segmenter.as_ref();
            let dprobs = down.backward(
                dc,
                d,
                slots.remove(&Branch::Downscaler),
                seg_cache.is_some(),
            );
            if let (Some(seg), Some(sc), Some(dp)) = (&self.segmenter, seg_cache, dprobs) {
                if let Some(g) = seg.backward(sc, dp, slots.remove(&Branch::Segmenter), need_input) {
                    input_grads.push(g);
                }
            }
        }
        if !need_input {
            return None;
        }
        let mut total = input_grads.into_iter().reduce(|a, b| a + b)?;
        total = total.as_standard_layout().into_owned();
        Some(total.into_dimensionality::<Ix4>().unwrap())
    }

    /// Parse `branch.layer` (e.g. `trunk.relu1`, `backbone.block3`).
    pub fn resolve_layer(&self, layer_id: &str) -> Result<LayerAddress, ModelError> {
        let unknown = || ModelError::UnknownLayer(layer_id.to_string());
        let (b, l) = layer_id.split_once('.').ok_or_else(unknown)?;
        let branch = Branch::from_name(b).ok_or_else(unknown)?;
        let seq = self.branch(branch).ok_or_else(unknown)?;
        let index = seq.position(l).ok_or_else(unknown)?;
        Ok(LayerAddress { branch, index })
    }

    /// Every addressable layer id, in graph order.
    pub fn layer_ids(&self) -> Vec<String> {
        self.branches()
            .flat_map(|(b, s)| {
                s.layers
                    .iter()
                    .map(move |(n, _)| format!("{}.{}", b.name(), n))
            })
            .collect()
    }

    /// Output of the addressed layer for a batch.
    pub fn layer_activation(
        &self,
        x: &Array4<T>,
        addr: LayerAddress,
    ) -> Result<ArrayD<T>, ModelError> {
        self.check_input(x)?;
        let xd = x.clone().into_dyn();
        let upto = addr.index + 1;
        Ok(match addr.branch {
            Branch::Trunk | Branch::Backbone | Branch::Segmenter => self
                .branch(addr.branch)
                .unwrap()
                .forward_until(&xd, upto),
            Branch::Downscaler => {
                let probs = self.segmenter.as_ref().unwrap().forward(&xd);
                self.downscaler.as_ref().unwrap().forward_until(&probs, upto)
            }
            Branch::Head => self.head.forward_until(&self.features(&xd), upto),
        })
    }

    /// Activation of the addressed layer together with the input gradient of
    /// `sum(activation * seed(activation))`, where `seed` builds the upstream
    /// gradient from the activation.
    pub fn layer_activation_grad(
        &self,
        x: &Array4<T>,
        addr: LayerAddress,
        seed: impl FnOnce(&ArrayD<T>) -> ArrayD<T>,
    ) -> Result<(ArrayD<T>, Array4<T>), ModelError> {
        self.check_input(x)?;
        let xd = x.clone().into_dyn();
        let upto = addr.index + 1;
        let to4 = |g: ArrayD<T>| g.into_dimensionality::<Ix4>().unwrap();
        Ok(match addr.branch {
            Branch::Trunk | Branch::Backbone | Branch::Segmenter => {
                let seq = self.branch(addr.branch).unwrap();
                let (act, cache) = seq.forward_train_until(&xd, upto);
                let d = seed(&act);
                let g = seq.backward(&cache, d, None, true).unwrap();
                (act, to4(g))
            }
            Branch::Downscaler => {
                let seg = self.segmenter.as_ref().unwrap();
                let down = self.downscaler.as_ref().unwrap();
                let (probs, sc) = seg.forward_train(&xd);
                let (act, dc) = down.forward_train_until(&probs, upto);
                let d = seed(&act);
                let dp = down.backward(&dc, d, None, true).unwrap();
                let g = seg.backward(&sc, dp, None, true).unwrap();
                (act, to4(g))
            }
            Branch::Head => {
                let (feats, parts) = self.features_train(&xd, CacheMode::All);
                let (act, hc) = self.head.forward_train_until(&feats, upto);
                let d = seed(&act);
                let dfeat = self.head.backward(&hc, d, None, true).unwrap();
                let (trunk, backbone, segmenter, downscaler, widths) = parts;
                let cache = NetworkCache {
                    trunk,
                    backbone,
                    segmenter,
                    downscaler,
                    head: hc,
                    widths,
                };
                let g = self
                    .backward_features(&cache, dfeat, Default::default(), true)
                    .unwrap();
                (act, g)
            }
        })
    }
}

/// Stack images into an `[N, 3, H, W]` batch of element type `T`.
pub fn stack_images<T: Scalar>(images: &[ImageTensor]) -> Array4<T> {
    let (c, h, w) = images.first().map(|i| i.shape()).unwrap_or((3, 0, 0));
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (mut dst, img) in out.axis_iter_mut(Axis(0)).zip(images) {
        dst.zip_mut_with(&img.0, |d, &s| *d = T::from_f32(s).unwrap());
    }
    out
}

impl Network<f32> {
    /// Raw model outputs for already-preprocessed images.
    pub fn score_images(&self, images: &[ImageTensor]) -> Result<Vec<f32>, ModelError> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(bad) = images.iter().find(|i| i.shape() != images[0].shape()) {
            let s = self.config.input_size;
            return Err(ModelError::InputShape {
                expected: (3, s, s),
                found: bad.shape(),
            });
        }
        Ok(self.forward(&stack_images(images))?.to_vec())
    }
}
