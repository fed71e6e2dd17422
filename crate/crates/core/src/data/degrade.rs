//! Synthetic corruptions: additive Gaussian noise and linear motion blur.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DegradationKind {
    GaussianNoise,
    MotionBlur,
    BlurPlusNoise,
}

impl DegradationKind {
    pub fn name(self) -> &'static str {
        match self {
            DegradationKind::GaussianNoise => "gaussian_noise",
            DegradationKind::MotionBlur => "motion_blur",
            DegradationKind::BlurPlusNoise => "blur_plus_noise",
        }
    }

    fn blurs(self) -> bool {
        matches!(self, DegradationKind::MotionBlur | DegradationKind::BlurPlusNoise)
    }

    fn adds_noise(self) -> bool {
        matches!(self, DegradationKind::GaussianNoise | DegradationKind::BlurPlusNoise)
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian_noise" | "noise" | "gaussian" => Ok(DegradationKind::GaussianNoise),
            "motion_blur" | "blur" => Ok(DegradationKind::MotionBlur),
            "blur_plus_noise" => Ok(DegradationKind::BlurPlusNoise),
            other => Err(Error::config(format!("unknown degradation kind `{other}`"))),
        }
    }
}

/// Direction of the blur line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BlurAngle {
    Degrees(f64),
    /// Uniform in [0, 180) per image.
    Random,
}

impl fmt::Display for BlurAngle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlurAngle::Degrees(d) => write!(f, "{d}"),
            BlurAngle::Random => f.write_str("random"),
        }
    }
}

impl FromStr for BlurAngle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("random") {
            return Ok(BlurAngle::Random);
        }
        s.parse::<f64>()
            .ok()
            .filter(|d| d.is_finite())
            .map(BlurAngle::Degrees)
            .ok_or_else(|| Error::config(format!("blur angle must be degrees or `random`, got `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    /// Noise standard deviation range in 8-bit units.
    pub sigma_range: (f64, f64),
    pub kernel_len: usize,
    pub kernel_angle: BlurAngle,
    pub seed: u64,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        DegradationSpec {
            kind: DegradationKind::GaussianNoise,
            sigma_range: (25.0, 25.0),
            kernel_len: 9,
            kernel_angle: BlurAngle::Random,
            seed: 0,
        }
    }
}

impl DegradationSpec {
    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        DegradationSpec {
            sigma_range: (sigma, sigma),
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.sigma_range;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return Err(Error::config(format!("invalid sigma range [{lo}, {hi}]")));
        }
        if self.kernel_len == 0 || self.kernel_len % 2 == 0 {
            return Err(Error::config(format!("blur kernel length must be odd, got {}", self.kernel_len)));
        }
        Ok(())
    }

    /// The RNG stream reserved for image `index`.
    pub fn image_rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

/// Normalized `len`×`len` kernel of a line through the center at `degrees`
/// from the horizontal, rasterized with bilinear splatting.
pub fn motion_kernel(len: usize, degrees: f64) -> Vec<f64> {
    let mut k = vec![0.0; len * len];
    let center = (len / 2) as f64;
    let half = (len as f64 - 1.0) / 2.0;
    let (sin, cos) = degrees.to_radians().sin_cos();
    let steps = 16 * len;
    for s in 0..steps {
        let t = if steps == 1 {
            0.0
        } else {
            -half + 2.0 * half * s as f64 / (steps - 1) as f64
        };
        let x = center + t * cos;
        let y = center - t * sin;
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let (yy, xx) = (y0 as isize + dy, x0 as isize + dx);
                if wy * wx > 0.0 && (0..len as isize).contains(&yy) && (0..len as isize).contains(&xx) {
                    k[yy as usize * len + xx as usize] += wy * wx;
                }
            }
        }
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Convolves every plane with `kernel`, replicating edge pixels.
pub fn blur(x: &Tensor<f32>, kernel: &[f64], len: usize) -> Tensor<f32> {
    let s = x.shape();
    let r = (len / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    Tensor::from_fn(s, |n, c, y, xx| {
        let mut acc = 0.0f64;
        for ky in 0..len {
            let sy = clampi(y as isize + ky as isize - r, s.h);
            for kx in 0..len {
                let w = kernel[ky * len + kx];
                if w != 0.0 {
                    let sx = clampi(xx as isize + kx as isize - r, s.w);
                    acc += w * x.at(n, c, sy, sx) as f64;
                }
            }
        }
        acc as f32
    })
}

/// Adds N(0, σ²) noise in 8-bit units to a [0, 1] tensor, then clamps.
pub fn add_noise(x: &Tensor<f32>, sigma: f64, rng: &mut impl Rng) -> Tensor<f32> {
    if sigma == 0.0 {
        return x.clone();
    }
    let scale = sigma / 255.0;
    let mut out = x.clone();
    for v in out.data_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = (*v as f64 + scale * z).clamp(0.0, 1.0) as f32;
    }
    out
}

/// Corrupts a clean [0, 1] tensor, drawing every random choice from `rng`.
pub fn degrade(clean: &Tensor<f32>, spec: &DegradationSpec, rng: &mut impl Rng) -> Tensor<f32> {
    let mut out = clean.clone();
    if spec.kind.blurs() && spec.kernel_len > 1 {
        let degrees = match spec.kernel_angle {
            BlurAngle::Degrees(d) => d,
            BlurAngle::Random => rng.gen_range(0.0..180.0),
        };
        out = blur(&out, &motion_kernel(spec.kernel_len, degrees), spec.kernel_len);
    }
    if spec.kind.adds_noise() {
        let (lo, hi) = spec.sigma_range;
        let sigma = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
        out = add_noise(&out, sigma, rng);
    }
    out
}

/// `(degraded, clean)` for image `index`, reproducible from the spec seed.
pub fn degrade_indexed(clean: &Tensor<f32>, spec: &DegradationSpec, index: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = spec.image_rng(index);
    (degrade(clean, spec, &mut rng), clean.clone())
}
