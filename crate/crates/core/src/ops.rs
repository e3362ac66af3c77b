//! Differentiable building blocks shared by the generator and the perceptual
//! network. Each layer exposes a forward pass plus the adjoint needed by the
//! hand-written backward passes in [`crate::crn`] and [`crate::perceptual`].

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Result};
use crate::scalar::Real;
use crate::tensor::FeatureMap;

/// Square convolution with odd kernel, stride 1 and zero "same" padding.
///
/// Weights are stored `[out][in][ky][kx]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: vec![T::zero(); out_channels * in_channels * kernel * kernel],
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }
    pub fn out_channels(&self) -> usize {
        self.out_channels
    }
    pub fn kernel(&self) -> usize {
        self.kernel
    }
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }
    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        contract!(
            x.channels() == self.in_channels,
            "convolution expects {} input channels, got {}",
            self.in_channels,
            x.channels()
        );
        let (h, w) = (x.height(), x.width());
        let hw = h * w;
        let mut out = FeatureMap::zeros(self.out_channels, h, w);
        for (o, plane) in out.data_mut().chunks_mut(hw.max(1)).enumerate() {
            plane.fill(self.bias[o]);
        }
        let cols;
        let b: &[T] = if self.kernel == 1 {
            x.data()
        } else {
            cols = im2col(x, self.kernel);
            &cols
        };
        T::gemm(
            self.out_channels,
            self.patch_len(),
            hw,
            T::one(),
            &self.weight,
            (self.patch_len() as isize, 1),
            b,
            (hw as isize, 1),
            T::one(),
            out.data_mut(),
            (hw as isize, 1),
        );
        Ok(out)
    }

    /// Gradient with respect to the input only (frozen weights).
    pub fn backward_input(&self, dy: &FeatureMap<T>) -> FeatureMap<T> {
        let (h, w) = (dy.height(), dy.width());
        let hw = h * w;
        let ck = self.patch_len();
        if self.kernel == 1 {
            let mut dx = FeatureMap::zeros(self.in_channels, h, w);
            self.weight_t_times(dy, dx.data_mut());
            return dx;
        }
        let mut dcols = vec![T::zero(); ck * hw];
        self.weight_t_times(dy, &mut dcols);
        col2im(&dcols, self.in_channels, h, w, self.kernel)
    }

    /// Full backward pass: accumulates parameter gradients into `grad` and
    /// returns the input gradient.
    pub fn backward(&self, x: &FeatureMap<T>, dy: &FeatureMap<T>, grad: &mut Conv2d<T>) -> FeatureMap<T> {
        let hw = x.plane_len();
        let ck = self.patch_len();
        for (o, plane) in dy.data().chunks(hw.max(1)).enumerate() {
            grad.bias[o] += plane.iter().copied().sum::<T>();
        }
        let cols;
        let b: &[T] = if self.kernel == 1 {
            x.data()
        } else {
            cols = im2col(x, self.kernel);
            &cols
        };
        // dW += dY * cols^T
        T::gemm(
            self.out_channels,
            hw,
            ck,
            T::one(),
            dy.data(),
            (hw as isize, 1),
            b,
            (1, hw as isize),
            T::one(),
            &mut grad.weight,
            (ck as isize, 1),
        );
        self.backward_input(dy)
    }

    fn weight_t_times(&self, dy: &FeatureMap<T>, out: &mut [T]) {
        let hw = dy.plane_len();
        let ck = self.patch_len();
        T::gemm(
            ck,
            self.out_channels,
            hw,
            T::one(),
            &self.weight,
            (1, ck as isize),
            dy.data(),
            (hw as isize, 1),
            T::zero(),
            out,
            (hw as isize, 1),
        );
    }
}

/// Unfolds `kernel x kernel` neighbourhoods into a `(C*k*k) x (H*W)` matrix.
pub fn im2col<T: Real>(x: &FeatureMap<T>, kernel: usize) -> Vec<T> {
    let (c, h, w) = x.shape();
    let hw = h * w;
    let pad = (kernel / 2) as isize;
    let mut cols = vec![T::zero(); c * kernel * kernel * hw];
    for ch in 0..c {
        let plane = x.plane(ch);
        for ky in 0..kernel {
            let dy = ky as isize - pad;
            for kx in 0..kernel {
                let dx = kx as isize - pad;
                let row = (ch * kernel + ky) * kernel + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let (x0, x1) = valid_span(w, dx);
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = sy as usize * w;
                    let sx0 = (x0 as isize + dx) as usize;
                    dst[y * w + x0..y * w + x1]
                        .copy_from_slice(&plane[src_row + sx0..src_row + sx0 + (x1 - x0)]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back onto the image, accumulating.
pub fn col2im<T: Real>(cols: &[T], channels: usize, h: usize, w: usize, kernel: usize) -> FeatureMap<T> {
    let hw = h * w;
    let pad = (kernel / 2) as isize;
    let mut out = FeatureMap::zeros(channels, h, w);
    for ch in 0..channels {
        let plane = out.plane_mut(ch);
        for ky in 0..kernel {
            let dy = ky as isize - pad;
            for kx in 0..kernel {
                let dx = kx as isize - pad;
                let row = (ch * kernel + ky) * kernel + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let (x0, x1) = valid_span(w, dx);
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = sy as usize * w;
                    let sx0 = (x0 as isize + dx) as usize;
                    for (d, &s) in plane[dst_row + sx0..dst_row + sx0 + (x1 - x0)]
                        .iter_mut()
                        .zip(&src[y * w + x0..y * w + x1])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
    out
}

/// Output columns `x` for which `x + dx` lies inside `[0, w)`.
fn valid_span(w: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx).clamp(0, w as isize) as usize;
    (lo.min(w), hi)
}

/// Normalization over a whole feature map (all channels and positions) with a
/// learned per-channel gain and offset.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Vec<T>,
    pub bias: Vec<T>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    normalized: FeatureMap<T>,
    inv_std: T,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gain: vec![T::one(); channels],
            bias: vec![T::zero(); channels],
        }
    }

    pub fn zeros(channels: usize) -> Self {
        Self {
            gain: vec![T::zero(); channels],
            bias: vec![T::zero(); channels],
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.gain.len() + self.bias.len()
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> (FeatureMap<T>, LayerNormCache<T>) {
        let n = T::of(x.data().len() as f64);
        let mean = x.data().iter().copied().sum::<T>() / n;
        let var = x.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv_std = T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt();
        let normalized = x.map(|v| (v - mean) * inv_std);
        let mut y = normalized.clone();
        for c in 0..y.channels() {
            let (g, b) = (self.gain[c], self.bias[c]);
            for v in y.plane_mut(c) {
                *v = *v * g + b;
            }
        }
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache<T>,
        dy: &FeatureMap<T>,
        grad: &mut LayerNorm<T>,
    ) -> FeatureMap<T> {
        let xhat = &cache.normalized;
        let mut dxhat = dy.clone();
        for c in 0..dy.channels() {
            let g = self.gain[c];
            let (mut dg, mut db) = (T::zero(), T::zero());
            for ((d, &dyv), &xh) in dxhat.plane_mut(c).iter_mut().zip(dy.plane(c)).zip(xhat.plane(c)) {
                dg += dyv * xh;
                db += dyv;
                *d = dyv * g;
            }
            grad.gain[c] += dg;
            grad.bias[c] += db;
        }
        let n = T::of(dy.data().len() as f64);
        let mean_d = dxhat.data().iter().copied().sum::<T>() / n;
        let mean_dx = dxhat
            .data()
            .iter()
            .zip(xhat.data())
            .map(|(&d, &x)| d * x)
            .sum::<T>()
            / n;
        let s = cache.inv_std;
        for (d, &x) in dxhat.data_mut().iter_mut().zip(xhat.data()) {
            *d = s * (*d - mean_d - x * mean_dx);
        }
        dxhat
    }
}

pub fn leaky_relu<T: Real>(x: &mut FeatureMap<T>, slope: T) {
    for v in x.data_mut() {
        if *v < T::zero() {
            *v *= slope;
        }
    }
}

/// Backward of [`leaky_relu`] given the activation output (sign-preserving
/// for positive slopes).
pub fn leaky_relu_backward<T: Real>(out: &FeatureMap<T>, dy: &mut FeatureMap<T>, slope: T) {
    for (d, &o) in dy.data_mut().iter_mut().zip(out.data()) {
        if o < T::zero() {
            *d *= slope;
        }
    }
}

pub fn relu<T: Real>(x: &mut FeatureMap<T>) {
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

pub fn relu_backward<T: Real>(out: &FeatureMap<T>, dy: &mut FeatureMap<T>) {
    for (d, &o) in dy.data_mut().iter_mut().zip(out.data()) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
}

pub fn sigmoid<T: Real>(x: &mut FeatureMap<T>) {
    for v in x.data_mut() {
        *v = T::one() / (T::one() + (-*v).exp());
    }
}

pub fn sigmoid_backward<T: Real>(out: &FeatureMap<T>, dy: &mut FeatureMap<T>) {
    for (d, &o) in dy.data_mut().iter_mut().zip(out.data()) {
        *d *= o * (T::one() - o);
    }
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
/// Returns the pooled map and the flat source index of every maximum.
pub fn max_pool2<T: Real>(x: &FeatureMap<T>) -> (FeatureMap<T>, Vec<u32>) {
    let (c, h, w) = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = FeatureMap::zeros(c, oh, ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    let src = x.data();
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                out.set(ch, oy, ox, src[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward<T: Real>(
    dy: &FeatureMap<T>,
    argmax: &[u32],
    input_shape: (usize, usize, usize),
) -> FeatureMap<T> {
    let (c, h, w) = input_shape;
    let mut dx = FeatureMap::zeros(c, h, w);
    let data = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        data[i as usize] += g;
    }
    dx
}

/// One axis of a separable linear resampling: for each output index, the
/// first contributing input index and its weights.
#[derive(Debug, Clone)]
struct AxisTaps {
    starts: Vec<usize>,
    weights: Vec<Vec<f64>>,
}

impl AxisTaps {
    /// Triangle (bilinear) filter on half-pixel centres. When shrinking, the
    /// filter support widens by the scale factor so every input pixel
    /// contributes; when enlarging this is plain bilinear interpolation with
    /// edge clamping. Weights are renormalised over in-range taps, so
    /// constants are preserved and an equal-size resize is the identity.
    fn bilinear(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let support = scale.max(1.0);
        let mut starts = Vec::with_capacity(output);
        let mut weights = Vec::with_capacity(output);
        for o in 0..output {
            let center = (o as f64 + 0.5) * scale;
            let lo = libm::floor(center - support).max(0.0) as usize;
            let hi = (libm::ceil(center + support) as usize).min(input);
            let mut taps: Vec<f64> = (lo..hi)
                .map(|i| (1.0 - libm::fabs(i as f64 + 0.5 - center) / support).max(0.0))
                .collect();
            let mut first = lo;
            while taps.first() == Some(&0.0) && taps.len() > 1 {
                taps.remove(0);
                first += 1;
            }
            while taps.last() == Some(&0.0) && taps.len() > 1 {
                taps.pop();
            }
            let total: f64 = taps.iter().sum();
            if total > 0.0 {
                taps.iter_mut().for_each(|t| *t /= total);
            } else {
                // centre falls exactly between pixels at the border
                taps = vec![1.0];
                first = first.min(input - 1);
            }
            starts.push(first);
            weights.push(taps);
        }
        Self { starts, weights }
    }
}

/// Separable bilinear resampling to `(height, width)`.
pub fn resize_bilinear<T: Real>(x: &FeatureMap<T>, height: usize, width: usize) -> FeatureMap<T> {
    let (c, h, w) = x.shape();
    if (h, w) == (height, width) {
        return x.clone();
    }
    let tx = AxisTaps::bilinear(w, width);
    let ty = AxisTaps::bilinear(h, height);
    let mut tmp = FeatureMap::zeros(c, h, width);
    for ch in 0..c {
        let src = x.plane(ch);
        let dst = tmp.plane_mut(ch);
        for y in 0..h {
            for ox in 0..width {
                let s = tx.starts[ox];
                let mut acc = 0.0;
                for (k, &wt) in tx.weights[ox].iter().enumerate() {
                    acc += wt * src[y * w + s + k].as_f64();
                }
                dst[y * width + ox] = T::of(acc);
            }
        }
    }
    let mut out = FeatureMap::zeros(c, height, width);
    for ch in 0..c {
        let src = tmp.plane(ch);
        let dst = out.plane_mut(ch);
        for oy in 0..height {
            let s = ty.starts[oy];
            for ox in 0..width {
                let mut acc = 0.0;
                for (k, &wt) in ty.weights[oy].iter().enumerate() {
                    acc += wt * src[(s + k) * width + ox].as_f64();
                }
                dst[oy * width + ox] = T::of(acc);
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`] from `(height, width)` back to the input
/// geometry `(in_h, in_w)`.
pub fn resize_bilinear_backward<T: Real>(dy: &FeatureMap<T>, in_h: usize, in_w: usize) -> FeatureMap<T> {
    let (c, height, width) = dy.shape();
    if (in_h, in_w) == (height, width) {
        return dy.clone();
    }
    let tx = AxisTaps::bilinear(in_w, width);
    let ty = AxisTaps::bilinear(in_h, height);
    let mut tmp = FeatureMap::zeros(c, in_h, width);
    for ch in 0..c {
        let src = dy.plane(ch);
        let dst = tmp.plane_mut(ch);
        for oy in 0..height {
            let s = ty.starts[oy];
            for (k, &wt) in ty.weights[oy].iter().enumerate() {
                let wt = T::of(wt);
                for ox in 0..width {
                    dst[(s + k) * width + ox] += wt * src[oy * width + ox];
                }
            }
        }
    }
    let mut out = FeatureMap::zeros(c, in_h, in_w);
    for ch in 0..c {
        let src = tmp.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..in_h {
            for ox in 0..width {
                let s = tx.starts[ox];
                let g = src[y * width + ox];
                for (k, &wt) in tx.weights[ox].iter().enumerate() {
                    dst[y * in_w + s + k] += T::of(wt) * g;
                }
            }
        }
    }
    out
}
