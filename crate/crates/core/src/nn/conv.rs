use ndarray::{linalg::general_mat_mul, Array2, Array4, ArrayD, ArrayView4, Axis, Ix1, Ix4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Scalar;

/// 2-D convolution with square kernels, computed as im2col followed by a
/// single matrix product over the whole batch.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    /// `[out, in, k, k]`
    pub weight: ArrayD<T>,
    /// `[out]`
    pub bias: ArrayD<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    /// He fan-in normal weights, zero bias.
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let weight = Array4::from_shape_fn((out_ch, in_ch, kernel, kernel), |_| {
            T::from_f64_lossy(normal.sample(rng))
        })
        .into_dyn();
        Conv2d {
            weight,
            bias: ArrayD::zeros(vec![out_ch]),
            stride,
            pad,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    fn weight_matrix(&self) -> ndarray::ArrayView2<'_, T> {
        let (o, i, k) = (self.out_channels(), self.in_channels(), self.kernel());
        self.weight
            .view()
            .into_shape_with_order((o, i * k * k))
            .expect("contiguous conv weight")
    }

    /// Returns the output and, when `keep` is set, the im2col matrix needed by
    /// [`Conv2d::backward`].
    pub fn forward(&self, x: ArrayView4<'_, T>, keep: bool) -> (Array4<T>, Option<Array2<T>>) {
        let (n, _, h, w) = x.dim();
        let (ho, wo) = self.output_hw(h, w);
        let cols = self.im2col(x);
        let mut out = Array2::<T>::zeros((self.out_channels(), n * ho * wo));
        general_mat_mul(T::one(), &self.weight_matrix(), &cols, T::zero(), &mut out);
        let bias = self.bias.view().into_dimensionality::<Ix1>().unwrap();
        for (mut row, &b) in out.axis_iter_mut(Axis(0)).zip(bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        let out = out
            .into_shape_with_order((self.out_channels(), n, ho, wo))
            .unwrap()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned();
        (out, keep.then_some(cols))
    }

    /// Backward pass. `grads` receives `(dweight, dbias)` accumulated in place;
    /// the input gradient is only assembled when `need_dx` is set.
    pub fn backward(
        &self,
        cols: &Array2<T>,
        in_shape: [usize; 4],
        dy: ArrayView4<'_, T>,
        grads: Option<(&mut ArrayD<T>, &mut ArrayD<T>)>,
        need_dx: bool,
    ) -> Option<Array4<T>> {
        let (n, co, ho, wo) = dy.dim();
        let dy2 = dy
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((co, n * ho * wo))
            .unwrap();
        if let Some((dw, db)) = grads {
            let (o, i, k) = (self.out_channels(), self.in_channels(), self.kernel());
            let mut dw2 = dw
                .view_mut()
                .into_shape_with_order((o, i * k * k))
                .expect("contiguous conv grad");
            general_mat_mul(T::one(), &dy2, &cols.t(), T::one(), &mut dw2);
            let mut db1 = db.view_mut().into_dimensionality::<Ix1>().unwrap();
            for (g, row) in db1.iter_mut().zip(dy2.axis_iter(Axis(0))) {
                *g += row.sum();
            }
        }
        if !need_dx {
            return None;
        }
        let mut dcols = Array2::<T>::zeros(cols.dim());
        general_mat_mul(T::one(), &self.weight_matrix().t(), &dy2, T::zero(), &mut dcols);
        Some(self.col2im(&dcols, in_shape))
    }

    fn im2col(&self, x: ArrayView4<'_, T>) -> Array2<T> {
        let (n, c, h, w) = x.dim();
        let k = self.kernel();
        let (ho, wo) = self.output_hw(h, w);
        let ncols = n * ho * wo;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut cols = vec![T::zero(); c * k * k * ncols];
        let (s, p) = (self.stride as isize, self.pad as isize);
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                    for ni in 0..n {
                        let src = &xs[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                        let dst = &mut dst_row[ni * ho * wo..(ni + 1) * ho * wo];
                        for oy in 0..ho {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                            let dst_out = &mut dst[oy * wo..(oy + 1) * wo];
                            for (ox, d) in dst_out.iter_mut().enumerate() {
                                let ix = ox as isize * s + kx as isize - p;
                                if ix >= 0 && ix < w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        Array2::from_shape_vec((c * k * k, ncols), cols).unwrap()
    }

    fn col2im(&self, dcols: &Array2<T>, in_shape: [usize; 4]) -> Array4<T> {
        let [n, c, h, w] = in_shape;
        let k = self.kernel();
        let (ho, wo) = self.output_hw(h, w);
        let ncols = n * ho * wo;
        let dc = dcols.as_slice().expect("standard layout");
        let mut dx = vec![T::zero(); n * c * h * w];
        let (s, p) = (self.stride as isize, self.pad as isize);
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src_row = &dc[row * ncols..(row + 1) * ncols];
                    for ni in 0..n {
                        let dst = &mut dx[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                        let src = &src_row[ni * ho * wo..(ni + 1) * ho * wo];
                        for oy in 0..ho {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                            for ox in 0..wo {
                                let ix = ox as isize * s + kx as isize - p;
                                if ix >= 0 && ix < w as isize {
                                    dst_row[ix as usize] += src[oy * wo + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        Array4::from_shape_vec((n, c, h, w), dx).unwrap()
    }
}

pub(crate) fn as4<T: Scalar>(x: &ArrayD<T>) -> ArrayView4<'_, T> {
    x.view().into_dimensionality::<Ix4>().expect("expected a 4-d tensor")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn naive_conv(conv: &Conv2d<f64>, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let k = conv.kernel();
        let (ho, wo) = conv.output_hw(h, w);
        let mut out = Array4::zeros((n, conv.out_channels(), ho, wo));
        for ni in 0..n {
            for o in 0..conv.out_channels() {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = conv.bias[[o]];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += conv.weight[[o, ci, ky, kx]]
                                            * x[[ni, ci, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        out[[ni, o, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 0, 5)] {
            let mut conv = Conv2d::<f64>::new(2, 3, k, stride, pad, &mut rng);
            conv.bias = ArrayD::from_shape_fn(vec![3], |i| i[0] as f64 * 0.1);
            let x = Array4::from_shape_fn((2, 2, 7, 6), |(a, b, c, d)| {
                ((a * 31 + b * 17 + c * 5 + d) % 11) as f64 / 11.0 - 0.4
            });
            let (fast, _) = conv.forward(x.view(), false);
            let slow = naive_conv(&conv, &x);
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn input_gradient_is_adjoint_of_forward() {
        // <conv(x) - b, dy> == <x, conv^T dy> for the linear part.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = Conv2d::<f64>::new(2, 4, 3, 2, 1, &mut rng);
        let x = Array4::from_shape_fn((2, 2, 6, 5), |(a, b, c, d)| {
            ((a + 2 * b + 3 * c + 5 * d) % 7) as f64 - 3.0
        });
        let (y, cols) = conv.forward(x.view(), true);
        let dy = Array4::from_shape_fn(y.dim(), |(a, b, c, d)| ((a + b + c * d) % 5) as f64 - 2.0);
        let dx = conv
            .backward(cols.as_ref().unwrap(), [2, 2, 6, 5], dy.view(), None, true)
            .unwrap();
        // bias is zero, so <conv(x), dy> = <x, conv^T(dy)>
        let lhs: f64 = y.iter().zip(dy.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(dx.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }
}
