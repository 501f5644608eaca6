//! Forward and backward compute kernels behind the tape.
//!
//! Forward kernels are generic over the scalar type so the same recorded
//! computation can be replayed in `f64` (the finite-difference oracle needs
//! more precision than `f32` evaluation noise allows). Reductions always
//! accumulate in `f64`. Backward kernels exist only for `f32`, the training
//! precision; they accumulate into caller-provided gradient buffers.
//!
//! Shape consistency is the caller's responsibility (the tape validates at
//! record time); kernels only `debug_assert` it.

/// Scalar abstraction over `f32`/`f64`.
pub trait Real:
    Copy
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn is_finite_val(self) -> bool;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f32(v: f32) -> Self {
        v
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn sin(self) -> Self {
        self.sin()
    }
    fn cos(self) -> Self {
        self.cos()
    }
    fn is_finite_val(self) -> bool {
        self.is_finite()
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn sin(self) -> Self {
        self.sin()
    }
    fn cos(self) -> Self {
        self.cos()
    }
    fn is_finite_val(self) -> bool {
        self.is_finite()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

pub fn add<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

pub fn sub<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

pub fn mul<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).collect()
}

pub fn scale<T: Real>(a: &[T], c: T) -> Vec<T> {
    a.iter().map(|&x| x * c).collect()
}

pub fn silu<T: Real>(a: &[T]) -> Vec<T> {
    a.iter().map(|&x| x * sigmoid(x)).collect()
}

/// d/dx [x * sigmoid(x)] = sigmoid(x) * (1 + x * (1 - sigmoid(x)))
pub fn silu_backward(x: &[f32], gout: &[f32], gin: &mut [f32]) {
    for i in 0..x.len() {
        let s = sigmoid(x[i]);
        gin[i] += gout[i] * s * (1.0 + x[i] * (1.0 - s));
    }
}

pub fn sin_fwd<T: Real>(a: &[T]) -> Vec<T> {
    a.iter().map(|&x| x.sin()).collect()
}

pub fn cos_fwd<T: Real>(a: &[T]) -> Vec<T> {
    a.iter().map(|&x| x.cos()).collect()
}

pub fn square<T: Real>(a: &[T]) -> Vec<T> {
    a.iter().map(|&x| x * x).collect()
}

// ---------------------------------------------------------------------------
// Bias broadcasts (the only broadcast forms the networks need)
// ---------------------------------------------------------------------------

/// `[n, m] + [m]`, bias added to every row.
pub fn add_row_bias<T: Real>(x: &[T], bias: &[T], n: usize, m: usize) -> Vec<T> {
    debug_assert_eq!(x.len(), n * m);
    debug_assert_eq!(bias.len(), m);
    let mut out = Vec::with_capacity(n * m);
    for row in 0..n {
        for col in 0..m {
            out.push(x[row * m + col] + bias[col]);
        }
    }
    out
}

pub fn add_row_bias_backward(gout: &[f32], n: usize, m: usize, gx: &mut [f32], gbias: &mut [f32]) {
    for i in 0..n * m {
        gx[i] += gout[i];
    }
    for row in 0..n {
        for col in 0..m {
            gbias[col] += gout[row * m + col];
        }
    }
}

/// `[c, h, w] + [c]`, one bias value per channel plane.
pub fn add_channel_bias<T: Real>(x: &[T], bias: &[T], channels: usize, plane: usize) -> Vec<T> {
    debug_assert_eq!(x.len(), channels * plane);
    debug_assert_eq!(bias.len(), channels);
    let mut out = Vec::with_capacity(x.len());
    for c in 0..channels {
        let b = bias[c];
        for i in 0..plane {
            out.push(x[c * plane + i] + b);
        }
    }
    out
}

pub fn add_channel_bias_backward(
    gout: &[f32],
    channels: usize,
    plane: usize,
    gx: &mut [f32],
    gbias: &mut [f32],
) {
    for i in 0..gout.len() {
        gx[i] += gout[i];
    }
    for c in 0..channels {
        let mut acc = 0.0f32;
        for i in 0..plane {
            acc += gout[c * plane + i];
        }
        gbias[c] += acc;
    }
}

// ---------------------------------------------------------------------------
// Matrix product
// ---------------------------------------------------------------------------

/// `[n, k] x [k, m] -> [n, m]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    let mut out = vec![T::ZERO; n * m];
    for i in 0..n {
        for kk in 0..k {
            let aik = a[i * k + kk];
            let b_row = &b[kk * m..(kk + 1) * m];
            let out_row = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                out_row[j] = out_row[j] + aik * b_row[j];
            }
        }
    }
    out
}

pub fn matmul_backward(
    gout: &[f32],
    a: &[f32],
    b: &[f32],
    n: usize,
    k: usize,
    m: usize,
    ga: &mut [f32],
    gb: &mut [f32],
) {
    // ga = gout * b^T
    for i in 0..n {
        let g_row = &gout[i * m..(i + 1) * m];
        for kk in 0..k {
            let b_row = &b[kk * m..(kk + 1) * m];
            let mut acc = 0.0f32;
            for j in 0..m {
                acc += g_row[j] * b_row[j];
            }
            ga[i * k + kk] += acc;
        }
    }
    // gb = a^T * gout
    for i in 0..n {
        let g_row = &gout[i * m..(i + 1) * m];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let gb_row = &mut gb[kk * m..(kk + 1) * m];
            for j in 0..m {
                gb_row[j] += aik * g_row[j];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// 2-D convolution (stride 1)
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct Conv2dDims {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub padding: usize,
}

impl Conv2dDims {
    pub fn out_height(&self) -> usize {
        self.height + 2 * self.padding + 1 - self.kernel_h
    }
    pub fn out_width(&self) -> usize {
        self.width + 2 * self.padding + 1 - self.kernel_w
    }
}

/// Direct convolution; inner loops run contiguous in the width axis.
pub fn conv2d<T: Real>(input: &[T], weight: &[T], d: Conv2dDims) -> Vec<T> {
    let (oh, ow) = (d.out_height(), d.out_width());
    debug_assert_eq!(input.len(), d.in_channels * d.height * d.width);
    debug_assert_eq!(
        weight.len(),
        d.out_channels * d.in_channels * d.kernel_h * d.kernel_w
    );
    let mut out = vec![T::ZERO; d.out_channels * oh * ow];
    let plane_in = d.height * d.width;
    let plane_out = oh * ow;
    for oc in 0..d.out_channels {
        let out_plane = &mut out[oc * plane_out..(oc + 1) * plane_out];
        for ic in 0..d.in_channels {
            let in_plane = &input[ic * plane_in..(ic + 1) * plane_in];
            let w_base = (oc * d.in_channels + ic) * d.kernel_h * d.kernel_w;
            for ky in 0..d.kernel_h {
                for kx in 0..d.kernel_w {
                    let wv = weight[w_base + ky * d.kernel_w + kx];
                    let dy = ky as isize - d.padding as isize;
                    let dx = kx as isize - d.padding as isize;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = ((d.height as isize - dy).min(oh as isize)).max(0) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((d.width as isize - dx).min(ow as isize)).max(0) as usize;
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let src = &in_plane[iy * d.width + (x0 as isize + dx) as usize..];
                        let dst = &mut out_plane[y * ow + x0..y * ow + x1];
                        for (o, &s) in dst.iter_mut().zip(src) {
                            *o = *o + wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_backward(
    gout: &[f32],
    input: &[f32],
    weight: &[f32],
    d: Conv2dDims,
    ginput: &mut [f32],
    gweight: &mut [f32],
) {
    let (oh, ow) = (d.out_height(), d.out_width());
    let plane_in = d.height * d.width;
    let plane_out = oh * ow;
    for oc in 0..d.out_channels {
        let g_plane = &gout[oc * plane_out..(oc + 1) * plane_out];
        for ic in 0..d.in_channels {
            let in_plane = &input[ic * plane_in..(ic + 1) * plane_in];
            let gin_plane = &mut ginput[ic * plane_in..(ic + 1) * plane_in];
            let w_base = (oc * d.in_channels + ic) * d.kernel_h * d.kernel_w;
            for ky in 0..d.kernel_h {
                for kx in 0..d.kernel_w {
                    let widx = w_base + ky * d.kernel_w + kx;
                    let wv = weight[widx];
                    let dy = ky as isize - d.padding as isize;
                    let dx = kx as isize - d.padding as isize;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = ((d.height as isize - dy).min(oh as isize)).max(0) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((d.width as isize - dx).min(ow as isize)).max(0) as usize;
                    let mut wacc = 0.0f32;
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let in_off = iy * d.width + (x0 as isize + dx) as usize;
                        let g_row = &g_plane[y * ow + x0..y * ow + x1];
                        let in_row = &in_plane[in_off..in_off + (x1 - x0)];
                        let gin_row = &mut gin_plane[in_off..in_off + (x1 - x0)];
                        for i in 0..g_row.len() {
                            gin_row[i] += wv * g_row[i];
                            wacc += g_row[i] * in_row[i];
                        }
                    }
                    gweight[widx] += wacc;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Pooling / resampling
// ---------------------------------------------------------------------------

/// Non-overlapping k x k average pooling over `[c, h, w]`.
pub fn avg_pool2d<T: Real>(x: &[T], channels: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    debug_assert!(h % k == 0 && w % k == 0);
    let (oh, ow) = (h / k, w / k);
    let inv = T::from_f64(1.0 / (k * k) as f64);
    let mut out = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = T::ZERO;
                for dy in 0..k {
                    for dx in 0..k {
                        acc = acc + plane[(y * k + dy) * w + xx * k + dx];
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    out
}

pub fn avg_pool2d_backward(
    gout: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    gin: &mut [f32],
) {
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f32;
    for c in 0..channels {
        for y in 0..oh {
            for xx in 0..ow {
                let g = gout[c * oh * ow + y * ow + xx] * inv;
                for dy in 0..k {
                    for dx in 0..k {
                        gin[c * h * w + (y * k + dy) * w + xx * k + dx] += g;
                    }
                }
            }
        }
    }
}

/// Nearest-neighbour upsampling by integer factor k over `[c, h, w]`.
pub fn upsample_nearest<T: Real>(x: &[T], channels: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h * k, w * k);
    let mut out = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                out.push(plane[(y / k) * w + xx / k]);
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(
    gout: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    gin: &mut [f32],
) {
    let (oh, ow) = (h * k, w * k);
    for c in 0..channels {
        for y in 0..oh {
            for xx in 0..ow {
                gin[c * h * w + (y / k) * w + xx / k] += gout[c * oh * ow + y * ow + xx];
            }
        }
    }
}

/// Per-channel spatial mean: `[c, h, w] -> [c]`.
pub fn global_avg_pool<T: Real>(x: &[T], channels: usize, plane: usize) -> Vec<T> {
    (0..channels)
        .map(|c| {
            let acc: f64 = x[c * plane..(c + 1) * plane]
                .iter()
                .map(|v| v.to_f64())
                .sum();
            T::from_f64(acc / plane as f64)
        })
        .collect()
}

pub fn global_avg_pool_backward(gout: &[f32], channels: usize, plane: usize, gin: &mut [f32]) {
    for c in 0..channels {
        let g = gout[c] / plane as f32;
        for i in 0..plane {
            gin[c * plane + i] += g;
        }
    }
}

// ---------------------------------------------------------------------------
// Reductions and losses (f64 accumulation)
// ---------------------------------------------------------------------------

pub fn sum_all<T: Real>(x: &[T]) -> T {
    T::from_f64(x.iter().map(|v| v.to_f64()).sum())
}

pub fn mean_all<T: Real>(x: &[T]) -> T {
    T::from_f64(x.iter().map(|v| v.to_f64()).sum::<f64>() / x.len() as f64)
}

pub fn mse<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let acc: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum();
    T::from_f64(acc / a.len() as f64)
}

pub fn mse_backward(g: f32, a: &[f32], b: &[f32], ga: &mut [f32], gb: &mut [f32]) {
    let scale = g * 2.0 / a.len() as f32;
    for i in 0..a.len() {
        let d = scale * (a[i] - b[i]);
        ga[i] += d;
        gb[i] -= d;
    }
}

/// Mean softmax cross-entropy over `[n, c]` logits with smoothed one-hot
/// targets: the true class gets `1 - smoothing + smoothing / c`, every other
/// class `smoothing / c`.
pub fn softmax_cross_entropy<T: Real>(
    logits: &[T],
    labels: &[usize],
    classes: usize,
    smoothing: f64,
) -> T {
    let n = labels.len();
    debug_assert_eq!(logits.len(), n * classes);
    let mut total = 0.0f64;
    for (row, &label) in labels.iter().enumerate() {
        let row_vals = &logits[row * classes..(row + 1) * classes];
        let max = row_vals
            .iter()
            .map(|v| v.to_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let log_z = row_vals
            .iter()
            .map(|v| (v.to_f64() - max).exp())
            .sum::<f64>()
            .ln()
            + max;
        let uniform = smoothing / classes as f64;
        for (j, v) in row_vals.iter().enumerate() {
            let q = if j == label {
                1.0 - smoothing + uniform
            } else {
                uniform
            };
            total -= q * (v.to_f64() - log_z);
        }
    }
    T::from_f64(total / n as f64)
}

pub fn softmax_cross_entropy_backward(
    g: f32,
    logits: &[f32],
    labels: &[usize],
    classes: usize,
    smoothing: f64,
    glogits: &mut [f32],
) {
    let n = labels.len();
    let scale = g / n as f32;
    for (row, &label) in labels.iter().enumerate() {
        let row_vals = &logits[row * classes..(row + 1) * classes];
        let max = row_vals.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut exps: Vec<f64> = row_vals.iter().map(|&v| ((v - max) as f64).exp()).collect();
        let z: f64 = exps.iter().sum();
        for e in &mut exps {
            *e /= z;
        }
        let uniform = smoothing / classes as f64;
        for j in 0..classes {
            let q = if j == label {
                1.0 - smoothing + uniform
            } else {
                uniform
            };
            glogits[row * classes + j] += scale * (exps[j] - q) as f32;
        }
    }
}
