//! Per-sample CPU kernels with hand-written backward passes.
//!
//! Activations are `(channels, height, width)` in standard layout.
//! Convolutions use same-padding and run as im2col + GEMM.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;

/// A convolution with a `kernel x kernel` window, stride 1 and zero
/// same-padding. The weight is stored as a `(out, in * k * k)` matrix whose
/// column index is `c * k * k + ky * k + kx`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl ConvGrad {
    pub fn zeros_like(conv: &Conv2d) -> Self {
        ConvGrad {
            weight: Array2::zeros(conv.weight.dim()),
            bias: Array1::zeros(conv.bias.dim()),
        }
    }
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Conv2d {
            in_ch,
            out_ch,
            kernel,
            weight: Array2::zeros((out_ch, in_ch * kernel * kernel)),
            bias: Array1::zeros(out_ch),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn columns(&self, x: &Array3<f32>) -> Array2<f32> {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_ch);
        if self.kernel == 1 {
            return x
                .to_shape((c, h * w))
                .expect("contiguous activation")
                .into_owned();
        }
        im2col(x, self.kernel)
    }

    pub fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        let (_, h, w) = x.dim();
        let cols = self.columns(x);
        let mut out = self.weight.dot(&cols);
        out += &self.bias.view().insert_axis(Axis(1));
        out.into_shape_with_order((self.out_ch, h, w))
            .expect("conv output shape")
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the input `x`.
    pub fn backward(&self, x: &Array3<f32>, grad_out: &Array3<f32>, grad: &mut ConvGrad) -> Array3<f32> {
        let (c, h, w) = x.dim();
        let g = grad_out
            .view()
            .into_shape_with_order((self.out_ch, h * w))
            .expect("contiguous gradient");
        let cols = self.columns(x);
        ndarray::linalg::general_mat_mul(1.0, &g, &cols.t(), 1.0, &mut grad.weight);
        grad.bias += &g.sum_axis(Axis(1));
        let grad_cols = self.weight.t().dot(&g);
        if self.kernel == 1 {
            grad_cols
                .into_shape_with_order((c, h, w))
                .expect("input gradient shape")
        } else {
            col2im(grad_cols.view(), (c, h, w), self.kernel)
        }
    }
}

fn valid_range(k_off: usize, pad: usize, n: usize) -> (usize, usize) {
    // output positions o with 0 <= o + k_off - pad < n
    let lo = pad.saturating_sub(k_off);
    let hi = (n + pad).saturating_sub(k_off).min(n);
    (lo, hi.max(lo))
}

pub fn im2col(x: &Array3<f32>, k: usize) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let pad = k / 2;
    let hw = h * w;
    let src = x.as_slice().expect("contiguous activation");
    let mut cols = vec![0.0f32; c * k * k * hw];
    for ci in 0..c {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let (y0, y1) = valid_range(ky, pad, h);
            for kx in 0..k {
                let (x0, x1) = valid_range(kx, pad, w);
                let row = (ci * k * k + ky * k + kx) * hw;
                for y in y0..y1 {
                    let sy = y + ky - pad;
                    let sx0 = x0 + kx - pad;
                    let dst = row + y * w;
                    cols[dst + x0..dst + x1].copy_from_slice(&plane[sy * w + sx0..sy * w + sx0 + (x1 - x0)]);
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, hw), cols).expect("im2col shape")
}

pub fn col2im(cols: ArrayView2<f32>, (c, h, w): (usize, usize, usize), k: usize) -> Array3<f32> {
    let pad = k / 2;
    let hw = h * w;
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let mut out = vec![0.0f32; c * hw];
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let (y0, y1) = valid_range(ky, pad, h);
            for kx in 0..k {
                let (x0, x1) = valid_range(kx, pad, w);
                let row = (ci * k * k + ky * k + kx) * hw;
                for y in y0..y1 {
                    let sy = y + ky - pad;
                    let sx0 = x0 + kx - pad;
                    let dst = &mut plane[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                    let from = &src[row + y * w + x0..row + y * w + x1];
                    for (d, f) in dst.iter_mut().zip(from) {
                        *d += f;
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((c, h, w), out).expect("col2im shape")
}

pub fn relu_inplace(x: &mut Array3<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes gradient entries where the (post-ReLU) activation is not positive.
pub fn relu_backward_inplace(grad: &mut Array3<f32>, activation: &Array3<f32>) {
    ndarray::Zip::from(grad).and(activation).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Inverted-dropout mask: 0 with probability `rate`, otherwise `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(rng: &mut R, dim: (usize, usize, usize), rate: f64) -> Array3<f32> {
    let keep = (1.0 / (1.0 - rate)) as f32;
    Array3::from_shape_simple_fn(dim, || if rng.random::<f64>() < rate { 0.0 } else { keep })
}

/// 2x2 max pooling with stride 2. Returns the pooled map and, per output
/// pixel, the offset `dy * 2 + dx` of the selected input.
pub fn max_pool2(x: &Array3<f32>) -> (Array3<f32>, Array3<u8>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::zeros((c, oh, ow));
    let mut arg = Array3::zeros((c, oh, ow));
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = x[[ci, 2 * y, 2 * xx]];
                let mut best_k = 0u8;
                for k in 1..4u8 {
                    let v = x[[ci, 2 * y + usize::from(k / 2), 2 * xx + usize::from(k % 2)]];
                    if v > best {
                        best = v;
                        best_k = k;
                    }
                }
                out[[ci, y, xx]] = best;
                arg[[ci, y, xx]] = best_k;
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(grad: &Array3<f32>, arg: &Array3<u8>, input_dim: (usize, usize, usize)) -> Array3<f32> {
    let mut out = Array3::zeros(input_dim);
    for ((ci, y, x), &g) in grad.indexed_iter() {
        let k = arg[[ci, y, x]];
        out[[ci, 2 * y + usize::from(k / 2), 2 * x + usize::from(k % 2)]] += g;
    }
    out
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, y, xx)| x[[ci, y / 2, xx / 2]])
}

pub fn upsample2_backward(grad: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = grad.dim();
    let mut out = Array3::zeros((c, h / 2, w / 2));
    for ((ci, y, x), &g) in grad.indexed_iter() {
        out[[ci, y / 2, x / 2]] += g;
    }
    out
}

pub fn concat_channels(a: &Array3<f32>, b: &Array3<f32>) -> Array3<f32> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("matching spatial dims")
}

pub fn split_channels(grad: &Array3<f32>, first: usize) -> (Array3<f32>, Array3<f32>) {
    (
        grad.slice(s![..first, .., ..]).to_owned(),
        grad.slice(s![first.., .., ..]).to_owned(),
    )
}

pub fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
