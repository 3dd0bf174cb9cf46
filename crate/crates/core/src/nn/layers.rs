use ndarray::{
    linalg::general_mat_mul, Array, Array2, Array4, ArrayD, ArrayView, Axis, Dimension, Ix1, Ix2,
    IxDyn, Zip,
};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::conv::as4;
use super::{Conv2d, Scalar};

/// Fully connected layer, `y = x Wᵀ + b`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    /// `[out, in]`
    pub weight: ArrayD<T>,
    /// `[out]`
    pub bias: ArrayD<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (2.0 / input as f64).sqrt()).expect("valid std");
        let weight =
            Array2::from_shape_fn((output, input), |_| T::from_f64_lossy(normal.sample(rng)))
                .into_dyn();
        Linear {
            weight,
            bias: ArrayD::zeros(vec![output]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    fn w(&self) -> ndarray::ArrayView2<'_, T> {
        self.weight.view().into_dimensionality::<Ix2>().unwrap()
    }

    fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let mut out = Array2::zeros((x.nrows(), self.outputs()));
        general_mat_mul(T::one(), x, &self.w().t(), T::zero(), &mut out);
        let b = self.bias.view().into_dimensionality::<Ix1>().unwrap();
        out += &b;
        out
    }
}

/// `relu(conv2(relu(conv1(x))) + shortcut(x))`; the shortcut is the identity
/// when shapes already match and a strided 1×1 projection otherwise.
#[derive(Clone, Debug)]
pub struct ResidualBlock<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub projection: Option<Conv2d<T>>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, stride: usize, rng: &mut R) -> Self {
        let conv1 = Conv2d::new(in_ch, out_ch, 3, stride, 1, rng);
        let conv2 = Conv2d::new(out_ch, out_ch, 3, 1, 1, rng);
        let projection =
            (in_ch != out_ch || stride != 1).then(|| Conv2d::new(in_ch, out_ch, 1, stride, 0, rng));
        ResidualBlock {
            conv1,
            conv2,
            projection,
        }
    }

    pub fn has_identity_shortcut(&self) -> bool {
        self.projection.is_none()
    }
}

#[derive(Clone, Debug)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    Linear(Linear<T>),
    Relu,
    /// 2×2 max pooling, stride 2; odd trailing rows/columns are dropped.
    MaxPool2,
    GlobalAvgPool,
    Flatten,
    Sigmoid,
    /// Softmax across the channel axis at every pixel.
    ChannelSoftmax,
    Residual(ResidualBlock<T>),
}

#[derive(Debug)]
pub enum Cache<T> {
    Conv { cols: Array2<T>, in_shape: [usize; 4] },
    Linear { input: Array2<T> },
    Relu { output: ArrayD<T> },
    MaxPool { argmax: Vec<usize>, in_shape: [usize; 4] },
    Shape { in_shape: Vec<usize> },
    Sigmoid { output: ArrayD<T> },
    Softmax { output: ArrayD<T> },
    Residual(Box<ResidualCache<T>>),
}

#[derive(Debug)]
pub struct ResidualCache<T> {
    in_shape: [usize; 4],
    cols1: Array2<T>,
    hidden: Array4<T>,
    cols2: Array2<T>,
    proj_cols: Option<Array2<T>>,
    output: Array4<T>,
}

fn dims4<T>(x: &ArrayD<T>) -> [usize; 4] {
    let s = x.shape();
    [s[0], s[1], s[2], s[3]]
}

impl<T: Scalar> Layer<T> {
    /// Number of parameter tensors owned by this layer.
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv(_) | Layer::Linear(_) => 2,
            Layer::Residual(b) => {
                if b.projection.is_some() {
                    6
                } else {
                    4
                }
            }
            _ => 0,
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &ArrayD<T>)> {
        match self {
            Layer::Conv(c) => vec![("weight", &c.weight), ("bias", &c.bias)],
            Layer::Linear(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            Layer::Residual(b) => {
                let mut v = vec![
                    ("conv1.weight", &b.conv1.weight),
                    ("conv1.bias", &b.conv1.bias),
                    ("conv2.weight", &b.conv2.weight),
                    ("conv2.bias", &b.conv2.bias),
                ];
                if let Some(p) = &b.projection {
                    v.push(("projection.weight", &p.weight));
                    v.push(("projection.bias", &p.bias));
                }
                v
            }
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ArrayD<T>> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Residual(b) => {
                let mut v = vec![
                    &mut b.conv1.weight,
                    &mut b.conv1.bias,
                    &mut b.conv2.weight,
                    &mut b.conv2.bias,
                ];
                if let Some(p) = &mut b.projection {
                    v.push(&mut p.weight);
                    v.push(&mut p.bias);
                }
                v
            }
            _ => Vec::new(),
        }
    }

    /// Channel count of the output given the input channel count.
    pub fn output_channels(&self, input: usize) -> usize {
        match self {
            Layer::Conv(c) => c.out_channels(),
            Layer::Linear(l) => l.outputs(),
            Layer::Residual(b) => b.conv1.out_channels(),
            _ => input,
        }
    }

    pub fn forward(&self, x: &ArrayD<T>, keep: bool) -> (ArrayD<T>, Option<Cache<T>>) {
        match self {
            Layer::Conv(conv) => {
                let (y, cols) = conv.forward(as4(x), keep);
                let cache = cols.map(|cols| Cache::Conv {
                    cols,
                    in_shape: dims4(x),
                });
                (y.into_dyn(), cache)
            }
            Layer::Linear(lin) => {
                let x2 = x.view().into_dimensionality::<Ix2>().expect("flat input").to_owned();
                let y = lin.forward(&x2);
                (y.into_dyn(), keep.then_some(Cache::Linear { input: x2 }))
            }
            Layer::Relu => {
                let y = x.mapv(|v| if v > T::zero() { v } else { T::zero() });
                let cache = keep.then(|| Cache::Relu { output: y.clone() });
                (y, cache)
            }
            Layer::MaxPool2 => {
                let (y, argmax) = maxpool_forward(x);
                let cache = keep.then(|| Cache::MaxPool {
                    argmax,
                    in_shape: dims4(x),
                });
                (y.into_dyn(), cache)
            }
            Layer::GlobalAvgPool => {
                let x4 = as4(x);
                let (n, c, h, w) = x4.dim();
                let hw = T::from_usize(h * w).unwrap();
                let y = Array2::from_shape_fn((n, c), |(i, j)| {
                    x4.index_axis(Axis(0), i).index_axis(Axis(0), j).sum() / hw
                });
                let cache = keep.then(|| Cache::Shape {
                    in_shape: x.shape().to_vec(),
                });
                (y.into_dyn(), cache)
            }
            Layer::Flatten => {
                let n = x.shape()[0];
                let rest = x.len() / n.max(1);
                let y = x
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&[n, rest]))
                    .unwrap();
                let cache = keep.then(|| Cache::Shape {
                    in_shape: x.shape().to_vec(),
                });
                (y, cache)
            }
            Layer::Sigmoid => {
                let y = x.mapv(|v| T::one() / (T::one() + (-v).exp()));
                let cache = keep.then(|| Cache::Sigmoid { output: y.clone() });
                (y, cache)
            }
            Layer::ChannelSoftmax => {
                let mut y = x.to_owned();
                for mut lane in y.lanes_mut(Axis(1)) {
                    let m = lane.fold(T::neg_infinity(), |a, &b| a.max(b));
                    lane.mapv_inplace(|v| (v - m).exp());
                    let s = lane.sum();
                    lane.mapv_inplace(|v| v / s);
                }
                let cache = keep.then(|| Cache::Softmax { output: y.clone() });
                (y, cache)
            }
            Layer::Residual(block) => residual_forward(block, x, keep),
        }
    }

    /// Back-propagate `dy`. Parameter gradients are accumulated into `grads`
    /// (one buffer per tensor, in [`Layer::params`] order) when provided.
    pub fn backward(
        &self,
        cache: &Cache<T>,
        dy: &ArrayD<T>,
        grads: Option<&mut [ArrayD<T>]>,
        need_dx: bool,
    ) -> Option<ArrayD<T>> {
        match (self, cache) {
            (Layer::Conv(conv), Cache::Conv { cols, in_shape }) => {
                conv.backward(cols, *in_shape, as4(dy), grad_pair(grads), need_dx)
                    .map(|d| d.into_dyn())
            }
            (Layer::Linear(lin), Cache::Linear { input }) => {
                let dy2 = dy.view().into_dimensionality::<Ix2>().unwrap();
                if let Some(g) = grads {
                    let (w, b) = g.split_at_mut(1);
                    let mut dw = w[0].view_mut().into_dimensionality::<Ix2>().unwrap();
                    general_mat_mul(T::one(), &dy2.t(), input, T::one(), &mut dw);
                    let mut db = b[0].view_mut().into_dimensionality::<Ix1>().unwrap();
                    db += &dy2.sum_axis(Axis(0));
                }
                need_dx.then(|| {
                    let mut dx = Array2::zeros(input.dim());
                    general_mat_mul(T::one(), &dy2, &lin.w(), T::zero(), &mut dx);
                    dx.into_dyn()
                })
            }
            (Layer::Relu, Cache::Relu { output }) => need_dx.then(|| relu_backward(output, dy.view())),
            (Layer::MaxPool2, Cache::MaxPool { argmax, in_shape }) => need_dx.then(|| {
                let mut dx = vec![T::zero(); in_shape.iter().product()];
                for (&idx, &g) in argmax.iter().zip(dy.iter()) {
                    dx[idx] += g;
                }
                ArrayD::from_shape_vec(IxDyn(in_shape), dx).unwrap()
            }),
            (Layer::GlobalAvgPool, Cache::Shape { in_shape }) => need_dx.then(|| {
                let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
                let dy2 = dy.view().into_dimensionality::<Ix2>().unwrap();
                let hw = T::from_usize(h * w).unwrap();
                Array4::from_shape_fn((n, c, h, w), |(i, j, _, _)| dy2[[i, j]] / hw).into_dyn()
            }),
            (Layer::Flatten, Cache::Shape { in_shape }) => need_dx.then(|| {
                dy.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(in_shape))
                    .unwrap()
            }),
            (Layer::Sigmoid, Cache::Sigmoid { output }) => need_dx.then(|| {
                let mut dx = dy.to_owned();
                Zip::from(&mut dx)
                    .and(output)
                    .for_each(|d, &s| *d = *d * s * (T::one() - s));
                dx
            }),
            (Layer::ChannelSoftmax, Cache::Softmax { output }) => need_dx.then(|| {
                let mut dx = ArrayD::zeros(output.raw_dim());
                for ((mut d, y), g) in dx
                    .lanes_mut(Axis(1))
                    .into_iter()
                    .zip(output.lanes(Axis(1)))
                    .zip(dy.lanes(Axis(1)))
                {
                    let dot: T = y.iter().zip(g.iter()).map(|(&a, &b)| a * b).sum();
                    Zip::from(&mut d)
                        .and(&y)
                        .and(&g)
                        .for_each(|d, &y, &g| *d = y * (g - dot));
                }
                dx
            }),
            (Layer::Residual(block), Cache::Residual(c)) => {
                residual_backward(block, c, dy, grads, need_dx)
            }
            _ => panic!("layer/cache mismatch in backward"),
        }
    }
}

fn relu_backward<T: Scalar, D: Dimension>(output: &Array<T, D>, dy: ArrayView<'_, T, D>) -> Array<T, D> {
    let mut dx = dy.to_owned();
    Zip::from(&mut dx).and(output).for_each(|d, &o| {
        if o <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}

fn grad_pair<T>(g: Option<&mut [ArrayD<T>]>) -> Option<(&mut ArrayD<T>, &mut ArrayD<T>)> {
    g.map(|s| {
        let (w, b) = s.split_at_mut(1);
        (&mut w[0], &mut b[0])
    })
}

fn maxpool_forward<T: Scalar>(x: &ArrayD<T>) -> (Array4<T>, Vec<usize>) {
    let x4 = as4(x);
    let (n, c, h, w) = x4.dim();
    let (ho, wo) = (h / 2, w / 2);
    let xs = x4.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xs[idx] > xs[best] {
                        best = idx;
                    }
                }
                out.push(xs[best]);
                argmax.push(best);
            }
        }
    }
    (
        Array4::from_shape_vec((n, c, ho, wo), out).unwrap(),
        argmax,
    )
}

fn residual_forward<T: Scalar>(
    block: &ResidualBlock<T>,
    x: &ArrayD<T>,
    keep: bool,
) -> (ArrayD<T>, Option<Cache<T>>) {
    let x4 = as4(x);
    let (a1, cols1) = block.conv1.forward(x4, keep);
    let hidden = a1.mapv(|v| v.max(T::zero()));
    let (a2, cols2) = block.conv2.forward(hidden.view(), keep);
    let (shortcut, proj_cols) = match &block.projection {
        Some(p) => {
            let (s, c) = p.forward(x4, keep);
            (s, c)
        }
        None => (x4.to_owned(), None),
    };
    let output = (a2 + shortcut).mapv(|v| v.max(T::zero()));
    let cache = keep.then(|| {
        Cache::Residual(Box::new(ResidualCache {
            in_shape: dims4(x),
            cols1: cols1.unwrap(),
            hidden,
            cols2: cols2.unwrap(),
            proj_cols,
            output: output.clone(),
        }))
    });
    (output.into_dyn(), cache)
}

fn residual_backward<T: Scalar>(
    block: &ResidualBlock<T>,
    c: &ResidualCache<T>,
    dy: &ArrayD<T>,
    grads: Option<&mut [ArrayD<T>]>,
    need_dx: bool,
) -> Option<ArrayD<T>> {
    let (g1, g2, gp) = match grads {
        Some(g) => {
            let (a, rest) = g.split_at_mut(2);
            let (b, p) = rest.split_at_mut(2);
            (Some(a), Some(b), Some(p))
        }
        None => (None, None, None),
    };
    let d = relu_backward(&c.output, as4(dy));
    let hs = c.hidden.dim();
    let dh = block
        .conv2
        .backward(&c.cols2, [hs.0, hs.1, hs.2, hs.3], d.view(), grad_pair(g2), true)
        .unwrap();
    let da1 = relu_backward(&c.hidden, dh.view());
    let dx_main = block
        .conv1
        .backward(&c.cols1, c.in_shape, da1.view(), grad_pair(g1), need_dx);
    let dx_short = match &block.projection {
        Some(p) => p.backward(
            c.proj_cols.as_ref().unwrap(),
            c.in_shape,
            d.view(),
            grad_pair(gp),
            need_dx,
        ),
        None => need_dx.then(|| d.clone()),
    };
    match (dx_main, dx_short) {
        (Some(a), Some(b)) => Some((a + b).into_dyn()),
        _ => None,
    }
}
