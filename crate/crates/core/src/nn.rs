//! Minimal convolutional layers with explicit backward passes.
//!
//! Every layer works on a single `C x H x W` sample. Forward passes that will
//! be differentiated return a cache; backward passes consume the cache and
//! optionally accumulate parameter gradients. Passing `None` for the gradient
//! sink propagates gradients to the input only, which is how a sub-network is
//! treated as frozen on one path while remaining trainable on another.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tensor::Tensor3;

/// Weights and biases of a square, stride-1, "same"-padded convolution.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConvParams<T> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    /// `out_channels x (in_channels * kernel * kernel)`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn zeros(out_channels: usize, in_channels: usize, kernel: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            kernel,
            weight: vec![T::zero(); out_channels * in_channels * kernel * kernel],
            bias: vec![T::zero(); out_channels],
        }
    }

    /// He-normal weights (fan-in), zero bias.
    pub fn kaiming<R: Rng + ?Sized>(out_channels: usize, in_channels: usize, kernel: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(out_channels, in_channels, kernel);
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, libm::sqrt(2.0 / fan_in)).expect("positive std");
        for w in p.weight.iter_mut() {
            *w = T::from_f64_lossy(normal.sample(rng));
        }
        p
    }

    /// Normal weights with the given standard deviation, constant bias.
    pub fn gaussian<R: Rng + ?Sized>(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        std: f64,
        bias: f64,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(out_channels, in_channels, kernel);
        let normal = Normal::new(0.0, std).expect("non-negative std");
        for w in p.weight.iter_mut() {
            *w = T::from_f64_lossy(normal.sample(rng));
        }
        p.bias.iter_mut().for_each(|b| *b = T::from_f64_lossy(bias));
        p
    }

    #[inline]
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.out_channels, self.in_channels, self.kernel)
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.weight.iter().chain(self.bias.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }
}

fn im2col<T: Scalar>(x: &Tensor3<T>, k: usize) -> Vec<T> {
    let (c, h, w) = x.shape();
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![T::zero(); c * k * k * hw];
    for ci in 0..c {
        let plane = x.channel(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for xo in x_lo..x_hi {
                        dst[xo] = src[(xo as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize) -> Tensor3<T> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut out = Tensor3::zeros(c, h, w);
    for ci in 0..c {
        let plane = out.channel_mut(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..][..w];
                    let dst = &mut plane[sy as usize * w..][..w];
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for xo in x_lo..x_hi {
                        dst[(xo as isize + dx) as usize] += src[xo];
                    }
                }
            }
        }
    }
    out
}

/// Cached im2col matrix (or the raw input for 1x1 kernels).
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    height: usize,
    width: usize,
}

fn conv_apply<T: Scalar>(p: &ConvParams<T>, cols: &[T], h: usize, w: usize) -> Tensor3<T> {
    let hw = h * w;
    let kk = p.patch_len();
    let mut out = Tensor3::zeros(p.out_channels, h, w);
    for (o, &b) in p.bias.iter().enumerate() {
        out.channel_mut(o).iter_mut().for_each(|v| *v = b);
    }
    T::gemm(
        p.out_channels,
        kk,
        hw,
        T::one(),
        &p.weight,
        kk as isize,
        1,
        cols,
        hw as isize,
        1,
        T::one(),
        out.data_mut(),
        hw as isize,
        1,
    );
    out
}

pub fn conv2d<T: Scalar>(p: &ConvParams<T>, x: &Tensor3<T>) -> Tensor3<T> {
    assert_eq!(x.channels(), p.in_channels, "conv2d: channel mismatch");
    let (h, w) = (x.height(), x.width());
    if p.kernel == 1 {
        conv_apply(p, x.data(), h, w)
    } else {
        conv_apply(p, &im2col(x, p.kernel), h, w)
    }
}

pub fn conv2d_cached<T: Scalar>(p: &ConvParams<T>, x: &Tensor3<T>) -> (Tensor3<T>, ConvCache<T>) {
    assert_eq!(x.channels(), p.in_channels, "conv2d: channel mismatch");
    let (h, w) = (x.height(), x.width());
    let cols = if p.kernel == 1 {
        x.data().to_vec()
    } else {
        im2col(x, p.kernel)
    };
    let out = conv_apply(p, &cols, h, w);
    (
        out,
        ConvCache {
            cols,
            height: h,
            width: w,
        },
    )
}

/// Returns the input gradient; accumulates into `grad` when given.
pub fn conv2d_backward<T: Scalar>(
    p: &ConvParams<T>,
    cache: &ConvCache<T>,
    dy: &Tensor3<T>,
    grad: Option<&mut ConvParams<T>>,
) -> Tensor3<T> {
    let (h, w) = (cache.height, cache.width);
    let hw = h * w;
    let kk = p.patch_len();
    dy.ensure_shape(p.out_channels, h, w).expect("conv2d_backward: gradient shape");
    if let Some(g) = grad {
        T::gemm(
            p.out_channels,
            hw,
            kk,
            T::one(),
            dy.data(),
            hw as isize,
            1,
            &cache.cols,
            1,
            hw as isize,
            T::one(),
            &mut g.weight,
            kk as isize,
            1,
        );
        for (o, gb) in g.bias.iter_mut().enumerate() {
            *gb += dy.channel(o).iter().copied().sum::<T>();
        }
    }
    let mut dcols = vec![T::zero(); kk * hw];
    T::gemm(
        kk,
        p.out_channels,
        hw,
        T::one(),
        &p.weight,
        1,
        kk as isize,
        dy.data(),
        hw as isize,
        1,
        T::zero(),
        &mut dcols,
        hw as isize,
        1,
    );
    if p.kernel == 1 {
        Tensor3::from_vec(p.in_channels, h, w, dcols).expect("shape")
    } else {
        col2im(&dcols, p.in_channels, h, w, p.kernel)
    }
}

pub fn relu<T: Scalar>(x: &Tensor3<T>) -> Tensor3<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// ReLU backward given the layer *output*.
pub fn relu_backward<T: Scalar>(out: &Tensor3<T>, dy: &Tensor3<T>) -> Tensor3<T> {
    let data = out
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    Tensor3::from_vec(dy.channels(), dy.height(), dy.width(), data).expect("shape")
}

#[derive(Debug, Clone)]
pub struct PoolCache {
    argmax: Vec<usize>,
    in_shape: (usize, usize, usize),
}

/// Non-overlapping `f x f` max pooling (floor of the spatial size).
pub fn max_pool<T: Scalar>(x: &Tensor3<T>, f: usize) -> (Tensor3<T>, PoolCache) {
    let (c, h, w) = x.shape();
    let (oh, ow) = (h / f, w / f);
    let mut out = Tensor3::zeros(c, oh, ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let plane = x.channel(ci);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = oy * f * w + ox * f;
                for dy in 0..f {
                    for dx in 0..f {
                        let idx = (oy * f + dy) * w + ox * f + dx;
                        if plane[idx] > plane[best] {
                            best = idx;
                        }
                    }
                }
                out.set(ci, oy, ox, plane[best]);
                argmax.push(ci * h * w + best);
            }
        }
    }
    (
        out,
        PoolCache {
            argmax,
            in_shape: (c, h, w),
        },
    )
}

pub fn max_pool_backward<T: Scalar>(cache: &PoolCache, dy: &Tensor3<T>) -> Tensor3<T> {
    let (c, h, w) = cache.in_shape;
    let mut dx = Tensor3::zeros(c, h, w);
    let d = dx.data_mut();
    for (&idx, &g) in cache.argmax.iter().zip(dy.data()) {
        d[idx] += g;
    }
    dx
}

/// Logistic function, kept strictly inside `(0, 1)` even where it saturates
/// in floating point.
pub fn sigmoid<T: Scalar>(v: T) -> T {
    let s = if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    };
    s.max(T::min_positive_value()).min(T::one() - T::epsilon())
}

/// Spatial mean of every channel.
pub fn global_average_pool<T: Scalar>(x: &Tensor3<T>) -> Vec<T> {
    let n = T::from_usize(x.plane_len()).expect("plane size");
    (0..x.channels())
        .map(|c| x.channel(c).iter().copied().sum::<T>() / n)
        .collect()
}

pub fn global_average_pool_backward<T: Scalar>(dy: &[T], height: usize, width: usize) -> Tensor3<T> {
    let n = T::from_usize(height * width).expect("plane size");
    Tensor3::from_fn(dy.len(), height, width, |c, _, _| dy[c] / n)
}

// One interpolation tap set per output coordinate.
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(src) as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i0 == in_len - 1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resampling with half-pixel alignment (`align_corners = false`).
pub fn resize_bilinear<T: Scalar>(x: &Tensor3<T>, out_h: usize, out_w: usize) -> Tensor3<T> {
    let (c, h, w) = x.shape();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let ty = bilinear_taps(out_h, h);
    let tx = bilinear_taps(out_w, w);
    Tensor3::from_fn(c, out_h, out_w, |ci, oy, ox| {
        let (y0, y1, fy) = ty[oy];
        let (x0, x1, fx) = tx[ox];
        let fy = T::from_f64_lossy(fy);
        let fx = T::from_f64_lossy(fx);
        let one = T::one();
        let top = x.get(ci, y0, x0) * (one - fx) + x.get(ci, y0, x1) * fx;
        let bottom = x.get(ci, y1, x0) * (one - fx) + x.get(ci, y1, x1) * fx;
        top * (one - fy) + bottom * fy
    })
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_backward<T: Scalar>(dy: &Tensor3<T>, in_h: usize, in_w: usize) -> Tensor3<T> {
    let (c, out_h, out_w) = dy.shape();
    if (in_h, in_w) == (out_h, out_w) {
        return dy.clone();
    }
    let ty = bilinear_taps(out_h, in_h);
    let tx = bilinear_taps(out_w, in_w);
    let mut dx = Tensor3::zeros(c, in_h, in_w);
    let one = T::one();
    for ci in 0..c {
        for oy in 0..out_h {
            let (y0, y1, fy) = ty[oy];
            let fy = T::from_f64_lossy(fy);
            for ox in 0..out_w {
                let (x0, x1, fx) = tx[ox];
                let fx = T::from_f64_lossy(fx);
                let g = dy.get(ci, oy, ox);
                let add = |t: &mut Tensor3<T>, y: usize, x: usize, v: T| {
                    let cur = t.get(ci, y, x);
                    t.set(ci, y, x, cur + v);
                };
                add(&mut dx, y0, x0, g * (one - fy) * (one - fx));
                add(&mut dx, y0, x1, g * (one - fy) * fx);
                add(&mut dx, y1, x0, g * fy * (one - fx));
                add(&mut dx, y1, x1, g * fy * fx);
            }
        }
    }
    dx
}

/// One step of a plain feed-forward stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Layer {
    /// Convolution using the parameter block at this index.
    Conv(usize),
    Relu,
    MaxPool(usize),
}

#[derive(Debug, Clone)]
pub enum LayerCache<T> {
    Conv(ConvCache<T>),
    Relu(Tensor3<T>),
    MaxPool(PoolCache),
}

/// Forward pass through `layers` without keeping intermediates.
pub fn forward<T: Scalar>(layers: &[Layer], params: &[ConvParams<T>], x: &Tensor3<T>) -> Tensor3<T> {
    let mut cur = x.clone();
    for layer in layers {
        cur = match *layer {
            Layer::Conv(i) => conv2d(&params[i], &cur),
            Layer::Relu => relu(&cur),
            Layer::MaxPool(f) => max_pool(&cur, f).0,
        };
    }
    cur
}

pub fn forward_cached<T: Scalar>(
    layers: &[Layer],
    params: &[ConvParams<T>],
    x: &Tensor3<T>,
) -> (Tensor3<T>, Vec<LayerCache<T>>) {
    let mut cur = x.clone();
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        cur = match *layer {
            Layer::Conv(i) => {
                let (out, cache) = conv2d_cached(&params[i], &cur);
                caches.push(LayerCache::Conv(cache));
                out
            }
            Layer::Relu => {
                let out = relu(&cur);
                caches.push(LayerCache::Relu(out.clone()));
                out
            }
            Layer::MaxPool(f) => {
                let (out, cache) = max_pool(&cur, f);
                caches.push(LayerCache::MaxPool(cache));
                out
            }
        };
    }
    (cur, caches)
}

/// Backward pass through `layers`. Parameter gradients are accumulated into
/// `grads` (indexed like `params`) when it is `Some`.
pub fn backward<T: Scalar>(
    layers: &[Layer],
    params: &[ConvParams<T>],
    caches: &[LayerCache<T>],
    dy: Tensor3<T>,
    mut grads: Option<&mut [ConvParams<T>]>,
) -> Tensor3<T> {
    let mut g = dy;
    for (layer, cache) in layers.iter().zip(caches).rev() {
        g = match (layer, cache) {
            (Layer::Conv(i), LayerCache::Conv(c)) => {
                let sink = grads.as_deref_mut().map(|gs| &mut gs[*i]);
                conv2d_backward(&params[*i], c, &g, sink)
            }
            (Layer::Relu, LayerCache::Relu(out)) => relu_backward(out, &g),
            (Layer::MaxPool(_), LayerCache::MaxPool(c)) => max_pool_backward(c, &g),
            _ => panic!("layer/cache mismatch"),
        };
    }
    g
}
