//! Raw forward and backward kernels on contiguous buffers.
//!
//! Every reduction here runs in a fixed order, so identical inputs give
//! bit-identical outputs.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use super::{cast, Real, Shape};
use crate::error::{Error, Result};

const LANES: usize = 8;

/// Dot product with eight fixed-order partial sums.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    let mut s = T::zero();
    for v in acc {
        s += v;
    }
    s + tail
}

/// Sum with eight fixed-order partial sums.
#[inline]
pub fn sum<T: Real>(a: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let mut chunks = a.chunks_exact(LANES);
    for x in &mut chunks {
        for l in 0..LANES {
            acc[l] += x[l];
        }
    }
    let mut tail = T::zero();
    for &x in chunks.remainder() {
        tail += x;
    }
    let mut s = T::zero();
    for v in acc {
        s += v;
    }
    s + tail
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

/// Range of output positions whose input tap `o*stride + k_off - pad` is in bounds.
#[inline]
fn valid_range(out_len: usize, in_len: usize, k_off: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k_off {
        (pad - k_off).div_ceil(stride)
    } else {
        0
    };
    let hi = if in_len + pad > k_off {
        ((in_len - 1 + pad - k_off) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Geometry shared by the dense convolution kernels.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub input: Shape,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn output(&self) -> Result<Shape> {
        let ho = conv_out_len(self.input.h, self.kernel, self.stride, self.pad);
        let wo = conv_out_len(self.input.w, self.kernel, self.stride, self.pad);
        match (ho, wo) {
            (Some(h), Some(w)) => Ok(Shape::new(self.input.n, self.c_out, h, w)),
            _ => Err(Error::config(format!(
                "kernel {} stride {} padding {} does not fit input {}",
                self.kernel, self.stride, self.pad, self.input
            ))),
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

pub fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], weight: &[T], bias: Option<&[T]>) -> Result<Vec<T>> {
    let out = g.output()?;
    let (ci_n, h, w) = (g.input.c, g.input.h, g.input.w);
    let (ho, wo) = (out.h, out.w);
    let k = g.kernel;
    let mut y = vec![T::zero(); out.numel()];
    let in_plane = h * w;
    let out_plane = ho * wo;
    for n in 0..g.input.n {
        let xn = &x[n * ci_n * in_plane..(n + 1) * ci_n * in_plane];
        for co in 0..g.c_out {
            let yp = &mut y[(n * g.c_out + co) * out_plane..(n * g.c_out + co + 1) * out_plane];
            if let Some(b) = bias {
                yp.fill(b[co]);
            }
            for ci in 0..ci_n {
                let xp = &xn[ci * in_plane..(ci + 1) * in_plane];
                let wk = &weight[(co * ci_n + ci) * k * k..(co * ci_n + ci + 1) * k * k];
                if g.is_pointwise() {
                    axpy(wk[0], xp, yp);
                    continue;
                }
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(ho, h, ky, g.stride, g.pad);
                    for kx in 0..k {
                        let wv = wk[ky * k + kx];
                        let (ox_lo, ox_hi) = valid_range(wo, w, kx, g.stride, g.pad);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let yrow = &mut yp[oy * wo + ox_lo..oy * wo + ox_hi];
                            if g.stride == 1 {
                                let ix0 = ox_lo + kx - g.pad;
                                let xrow = &xp[iy * w + ix0..iy * w + ix0 + (ox_hi - ox_lo)];
                                axpy(wv, xrow, yrow);
                            } else {
                                let xrow = &xp[iy * w..(iy + 1) * w];
                                for (j, yv) in yrow.iter_mut().enumerate() {
                                    let ix = (ox_lo + j) * g.stride + kx - g.pad;
                                    *yv += wv * xrow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Gradients of a dense convolution. Returns `(dx, dweight, dbias)`.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dy: &[T],
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> Result<(Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>)> {
    let out = g.output()?;
    let (ci_n, h, w) = (g.input.c, g.input.h, g.input.w);
    let (ho, wo) = (out.h, out.w);
    let k = g.kernel;
    let in_plane = h * w;
    let out_plane = ho * wo;
    let batch = g.input.n;

    let dx = want_dx.then(|| {
        let mut dx = vec![T::zero(); g.input.numel()];
        for n in 0..batch {
            for ci in 0..ci_n {
                let dxp = &mut dx[(n * ci_n + ci) * in_plane..(n * ci_n + ci + 1) * in_plane];
                for co in 0..g.c_out {
                    let dyp = &dy[(n * g.c_out + co) * out_plane..(n * g.c_out + co + 1) * out_plane];
                    let wk = &weight[(co * ci_n + ci) * k * k..(co * ci_n + ci + 1) * k * k];
                    if g.is_pointwise() {
                        axpy(wk[0], dyp, dxp);
                        continue;
                    }
                    for ky in 0..k {
                        let (oy_lo, oy_hi) = valid_range(ho, h, ky, g.stride, g.pad);
                        for kx in 0..k {
                            let wv = wk[ky * k + kx];
                            let (ox_lo, ox_hi) = valid_range(wo, w, kx, g.stride, g.pad);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            for oy in oy_lo..oy_hi {
                                let iy = oy * g.stride + ky - g.pad;
                                let dyrow = &dyp[oy * wo + ox_lo..oy * wo + ox_hi];
                                if g.stride == 1 {
                                    let ix0 = ox_lo + kx - g.pad;
                                    let dxrow = &mut dxp[iy * w + ix0..iy * w + ix0 + (ox_hi - ox_lo)];
                                    axpy(wv, dyrow, dxrow);
                                } else {
                                    let dxrow = &mut dxp[iy * w..(iy + 1) * w];
                                    for (j, &d) in dyrow.iter().enumerate() {
                                        let ix = (ox_lo + j) * g.stride + kx - g.pad;
                                        dxrow[ix] += wv * d;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    });

    let dw = want_dw.then(|| {
        let mut dw = vec![T::zero(); g.c_out * ci_n * k * k];
        for co in 0..g.c_out {
            for ci in 0..ci_n {
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(ho, h, ky, g.stride, g.pad);
                    for kx in 0..k {
                        let (ox_lo, ox_hi) = valid_range(wo, w, kx, g.stride, g.pad);
                        let mut acc = T::zero();
                        if ox_lo < ox_hi {
                            for n in 0..batch {
                                let dyp = &dy[(n * g.c_out + co) * out_plane..(n * g.c_out + co + 1) * out_plane];
                                let xp = &x[(n * ci_n + ci) * in_plane..(n * ci_n + ci + 1) * in_plane];
                                if g.is_pointwise() {
                                    acc += dot(dyp, xp);
                                    continue;
                                }
                                for oy in oy_lo..oy_hi {
                                    let iy = oy * g.stride + ky - g.pad;
                                    let dyrow = &dyp[oy * wo + ox_lo..oy * wo + ox_hi];
                                    if g.stride == 1 {
                                        let ix0 = ox_lo + kx - g.pad;
                                        acc += dot(dyrow, &xp[iy * w + ix0..iy * w + ix0 + (ox_hi - ox_lo)]);
                                    } else {
                                        let xrow = &xp[iy * w..(iy + 1) * w];
                                        for (j, &d) in dyrow.iter().enumerate() {
                                            acc += d * xrow[(ox_lo + j) * g.stride + kx - g.pad];
                                        }
                                    }
                                }
                            }
                        }
                        dw[((co * ci_n + ci) * k + ky) * k + kx] = acc;
                    }
                }
            }
        }
        dw
    });

    let db = want_db.then(|| {
        (0..g.c_out)
            .map(|co| {
                let mut acc = T::zero();
                for n in 0..batch {
                    acc += sum(&dy[(n * g.c_out + co) * out_plane..(n * g.c_out + co + 1) * out_plane]);
                }
                acc
            })
            .collect()
    });

    Ok((dx, dw, db))
}

/// Depthwise convolution, stride 1, zero padding `k/2`.
pub fn dwconv2d_forward<T: Real>(s: Shape, k: usize, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let pad = k / 2;
    let (h, w) = (s.h, s.w);
    let plane = h * w;
    let mut y = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let off = (n * s.c + c) * plane;
            let xp = &x[off..off + plane];
            let yp = &mut y[off..off + plane];
            if let Some(b) = bias {
                yp.fill(b[c]);
            }
            let wk = &weight[c * k * k..(c + 1) * k * k];
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(h, h, ky, 1, pad);
                for kx in 0..k {
                    let (ox_lo, ox_hi) = valid_range(w, w, kx, 1, pad);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let wv = wk[ky * k + kx];
                    let len = ox_hi - ox_lo;
                    for oy in oy_lo..oy_hi {
                        let iy = oy + ky - pad;
                        let ix0 = ox_lo + kx - pad;
                        axpy(wv, &xp[iy * w + ix0..iy * w + ix0 + len], &mut yp[oy * w + ox_lo..oy * w + ox_hi]);
                    }
                }
            }
        }
    }
    y
}

pub fn dwconv2d_backward<T: Real>(
    s: Shape,
    k: usize,
    x: &[T],
    weight: &[T],
    dy: &[T],
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let pad = k / 2;
    let (h, w) = (s.h, s.w);
    let plane = h * w;
    let dx = want_dx.then(|| {
        let mut dx = vec![T::zero(); s.numel()];
        for n in 0..s.n {
            for c in 0..s.c {
                let off = (n * s.c + c) * plane;
                let dyp = &dy[off..off + plane];
                let dxp = &mut dx[off..off + plane];
                let wk = &weight[c * k * k..(c + 1) * k * k];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(h, h, ky, 1, pad);
                    for kx in 0..k {
                        let (ox_lo, ox_hi) = valid_range(w, w, kx, 1, pad);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let wv = wk[ky * k + kx];
                        let len = ox_hi - ox_lo;
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - pad;
                            let ix0 = ox_lo + kx - pad;
                            axpy(wv, &dyp[oy * w + ox_lo..oy * w + ox_hi], &mut dxp[iy * w + ix0..iy * w + ix0 + len]);
                        }
                    }
                }
            }
        }
        dx
    });
    let dw = want_dw.then(|| {
        let mut dw = vec![T::zero(); s.c * k * k];
        for c in 0..s.c {
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(h, h, ky, 1, pad);
                for kx in 0..k {
                    let (ox_lo, ox_hi) = valid_range(w, w, kx, 1, pad);
                    let mut acc = T::zero();
                    if ox_lo < ox_hi {
                        let len = ox_hi - ox_lo;
                        for n in 0..s.n {
                            let off = (n * s.c + c) * plane;
                            let dyp = &dy[off..off + plane];
                            let xp = &x[off..off + plane];
                            for oy in oy_lo..oy_hi {
                                let iy = oy + ky - pad;
                                let ix0 = ox_lo + kx - pad;
                                acc += dot(&dyp[oy * w + ox_lo..oy * w + ox_hi], &xp[iy * w + ix0..iy * w + ix0 + len]);
                            }
                        }
                    }
                    dw[(c * k + ky) * k + kx] = acc;
                }
            }
        }
        dw
    });
    let db = want_db.then(|| {
        (0..s.c)
            .map(|c| {
                let mut acc = T::zero();
                for n in 0..s.n {
                    let off = (n * s.c + c) * plane;
                    acc += sum(&dy[off..off + plane]);
                }
                acc
            })
            .collect()
    });
    (dx, dw, db)
}

/// Saved statistics of a channel layer norm, per (n, position).
pub struct LayerNormSaved<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Normalizes the channel vector at every (n, h, w) position, then applies the
/// per-channel affine transform.
pub fn layernorm_forward<T: Real>(s: Shape, x: &[T], gamma: &[T], beta: &[T], eps: T) -> (Vec<T>, LayerNormSaved<T>) {
    let plane = s.plane();
    let inv_c = T::one() / cast::<T>(s.c as f64);
    let mut xhat = vec![T::zero(); s.numel()];
    let mut y = vec![T::zero(); s.numel()];
    let mut rstd_all = vec![T::zero(); s.n * plane];
    let mut mean = vec![T::zero(); plane];
    let mut var = vec![T::zero(); plane];
    for n in 0..s.n {
        let base = n * s.c * plane;
        mean.fill(T::zero());
        var.fill(T::zero());
        for c in 0..s.c {
            let xp = &x[base + c * plane..base + (c + 1) * plane];
            for (m, &v) in mean.iter_mut().zip(xp) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m *= inv_c;
        }
        for c in 0..s.c {
            let xp = &x[base + c * plane..base + (c + 1) * plane];
            for ((vv, &v), &m) in var.iter_mut().zip(xp).zip(&mean) {
                let d = v - m;
                *vv += d * d;
            }
        }
        let rstd = &mut rstd_all[n * plane..(n + 1) * plane];
        for (r, &v) in rstd.iter_mut().zip(&var) {
            *r = T::one() / (v * inv_c + eps).sqrt();
        }
        for c in 0..s.c {
            let range = base + c * plane..base + (c + 1) * plane;
            let xp = &x[range.clone()];
            let hp = &mut xhat[range.clone()];
            let yp = &mut y[range];
            for p in 0..plane {
                let xh = (xp[p] - mean[p]) * rstd[p];
                hp[p] = xh;
                yp[p] = xh * gamma[c] + beta[c];
            }
        }
    }
    (y, LayerNormSaved { xhat, rstd: rstd_all })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layernorm_backward<T: Real>(
    s: Shape,
    saved: &LayerNormSaved<T>,
    gamma: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane = s.plane();
    let inv_c = T::one() / cast::<T>(s.c as f64);
    let mut dx = vec![T::zero(); s.numel()];
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    let mut mean_dxhat = vec![T::zero(); plane];
    let mut mean_dxhat_xhat = vec![T::zero(); plane];
    for n in 0..s.n {
        let base = n * s.c * plane;
        mean_dxhat.fill(T::zero());
        mean_dxhat_xhat.fill(T::zero());
        for c in 0..s.c {
            let range = base + c * plane..base + (c + 1) * plane;
            let dyp = &dy[range.clone()];
            let hp = &saved.xhat[range];
            dgamma[c] += dot(dyp, hp);
            dbeta[c] += sum(dyp);
            for p in 0..plane {
                let d = dyp[p] * gamma[c];
                mean_dxhat[p] += d;
                mean_dxhat_xhat[p] += d * hp[p];
            }
        }
        for p in 0..plane {
            mean_dxhat[p] *= inv_c;
            mean_dxhat_xhat[p] *= inv_c;
        }
        let rstd = &saved.rstd[n * plane..(n + 1) * plane];
        for c in 0..s.c {
            let range = base + c * plane..base + (c + 1) * plane;
            let dyp = &dy[range.clone()];
            let hp = &saved.xhat[range.clone()];
            let dxp = &mut dx[range];
            for p in 0..plane {
                let d = dyp[p] * gamma[c];
                dxp[p] = rstd[p] * (d - mean_dxhat[p] - hp[p] * mean_dxhat_xhat[p]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Elementwise activation functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Relu,
    /// x·Φ(x) with Φ evaluated through erf.
    GeluExact,
    /// 0.5x(1 + tanh[√(2/π)(x + 0.044715x³)]).
    GeluTanh,
    Sigmoid,
    Silu,
    /// Φ(x), the standard normal CDF.
    NormalCdf,
}

impl Activation {
    pub const ALL: [Activation; 7] = [
        Activation::Identity,
        Activation::Relu,
        Activation::GeluExact,
        Activation::GeluTanh,
        Activation::Sigmoid,
        Activation::Silu,
        Activation::NormalCdf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::GeluExact => "gelu",
            Activation::GeluTanh => "gelu_tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Silu => "silu",
            Activation::NormalCdf => "normal_cdf",
        }
    }

    /// Whether this is a nonlinear activation function.
    pub fn is_nonlinear(self) -> bool {
        self != Activation::Identity
    }

    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Silu => x * sigmoid(x),
            Activation::GeluExact => x * normal_cdf(x),
            Activation::GeluTanh => {
                let half = cast::<T>(0.5);
                half * x * (T::one() + tanh_arg(x).tanh())
            }
            Activation::NormalCdf => normal_cdf(x),
        }
    }

    /// Derivative at `x`.
    #[inline]
    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s + x * s * (T::one() - s)
            }
            Activation::GeluExact => normal_cdf(x) + x * normal_pdf(x),
            Activation::GeluTanh => {
                let half = cast::<T>(0.5);
                let t = tanh_arg(x).tanh();
                let du = cast::<T>((2.0 / PI).sqrt()) * (T::one() + cast::<T>(3.0 * GELU_TANH_CUBIC) * x * x);
                half * (T::one() + t) + half * x * (T::one() - t * t) * du
            }
            Activation::NormalCdf => normal_pdf(x),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "identity" | "id" | "none" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "gelu" | "gelu_exact" => Ok(Activation::GeluExact),
            "gelu_tanh" => Ok(Activation::GeluTanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "silu" | "swish" => Ok(Activation::Silu),
            "normal_cdf" | "phi" => Ok(Activation::NormalCdf),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
}

const GELU_TANH_CUBIC: f64 = 0.044715;

#[inline]
fn tanh_arg<T: Real>(x: T) -> T {
    cast::<T>((2.0 / PI).sqrt()) * (x + cast::<T>(GELU_TANH_CUBIC) * x * x * x)
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn normal_cdf<T: Real>(x: T) -> T {
    cast(0.5 * (1.0 + libm::erf(x.as_f64() * FRAC_1_SQRT_2)))
}

#[inline]
fn normal_pdf<T: Real>(x: T) -> T {
    let v = x.as_f64();
    cast((-0.5 * v * v).exp() / (2.0 * PI).sqrt())
}

/// Channel-to-space rearrangement: (n, c·r², h, w) → (n, c, h·r, w·r).
pub fn pixel_shuffle<T: Real>(s: Shape, r: usize, x: &[T]) -> (Shape, Vec<T>) {
    let out = Shape::new(s.n, s.c / (r * r), s.h * r, s.w * r);
    let mut y = vec![T::zero(); s.numel()];
    for n in 0..out.n {
        for c in 0..out.c {
            for i in 0..r {
                for j in 0..r {
                    let src_c = c * r * r + i * r + j;
                    for h in 0..s.h {
                        let src = s.index(n, src_c, h, 0);
                        for w in 0..s.w {
                            y[out.index(n, c, h * r + i, w * r + j)] = x[src + w];
                        }
                    }
                }
            }
        }
    }
    (out, y)
}

/// Exact inverse of [`pixel_shuffle`]: (n, c, h, w) → (n, c·r², h/r, w/r).
pub fn pixel_unshuffle<T: Real>(s: Shape, r: usize, x: &[T]) -> (Shape, Vec<T>) {
    let out = Shape::new(s.n, s.c * r * r, s.h / r, s.w / r);
    let mut y = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..r {
                for j in 0..r {
                    let dst_c = c * r * r + i * r + j;
                    for h in 0..out.h {
                        let dst = out.index(n, dst_c, h, 0);
                        for w in 0..out.w {
                            y[dst + w] = x[s.index(n, c, h * r + i, w * r + j)];
                        }
                    }
                }
            }
        }
    }
    (out, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for in_len in 1..9 {
            for k in 1..5 {
                for stride in 1..3 {
                    for pad in 0..3 {
                        let Some(out_len) = conv_out_len(in_len, k, stride, pad) else {
                            continue;
                        };
                        for k_off in 0..k {
                            let (lo, hi) = valid_range(out_len, in_len, k_off, stride, pad);
                            for o in 0..out_len {
                                let i = (o * stride + k_off) as isize - pad as isize;
                                let inside = i >= 0 && (i as usize) < in_len;
                                assert_eq!(inside, o >= lo && o < hi, "{in_len} {k} {stride} {pad} {k_off} {o}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn dot_and_sum_match_naive() {
        let a: Vec<f64> = (0..29).map(|i| i as f64 * 0.5 - 3.0).collect();
        let b: Vec<f64> = (0..29).map(|i| (i as f64).sin()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
        assert!((sum(&a) - a.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn activation_names_round_trip() {
        for a in Activation::ALL {
            assert_eq!(a.name().parse::<Activation>().unwrap(), a);
        }
        assert!("softmax".parse::<Activation>().is_err());
    }

    #[test]
    fn activation_point_values() {
        assert_eq!(Activation::GeluExact.apply(0.0f64), 0.0);
        assert_eq!(Activation::Relu.apply(-1.0f64), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
        assert_eq!(Activation::Silu.apply(0.0f64), 0.0);
        assert!((Activation::NormalCdf.apply(0.0f64) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn activation_derivatives_match_central_differences() {
        let h = 1e-6;
        for a in Activation::ALL {
            for &x in &[-2.3f64, -0.7, 0.3, 1.1, 3.4] {
                let fd = (a.apply(x + h) - a.apply(x - h)) / (2.0 * h);
                let an = a.derivative(x);
                assert!((fd - an).abs() < 1e-7, "{a} at {x}: {an} vs {fd}");
            }
        }
    }
}
