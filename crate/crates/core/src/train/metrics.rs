use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Stabilizer inside the PSNR loss logarithm.
pub const PSNR_LOSS_EPS: f64 = 1e-8;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// `10·log10(MSE(pred, target) + eps)`, i.e. negative PSNR at unit peak.
pub fn psnr_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    let (a, b) = (g.shape(pred), g.shape(target));
    if a != b {
        return Err(Error::config(format!("psnr loss between {a} and {b}")));
    }
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    let mse = g.mean(sq)?;
    g.log10(mse, 10.0, PSNR_LOSS_EPS)
}

pub fn mse<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::config(format!("mse between {} and {}", pred.shape(), target.shape())));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    Ok(sum / pred.len().max(1) as f64)
}

/// `20·log10(max_val) − 10·log10(MSE)`; `+∞` for identical inputs.
pub fn psnr<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, max_val: f64) -> Result<f64> {
    let m = mse(pred, target)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * max_val.log10() - 10.0 * m.log10())
}

/// [`psnr`] at unit peak, capped at [`PSNR_CAP`].
pub fn psnr_capped<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    Ok(psnr(pred, target, 1.0)?.min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-region filtering of an `h`×`w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over every plane with an 11×11 Gaussian
/// window (σ = 1.5), K1 = 0.01, K2 = 0.03, unit dynamic range, valid region.
pub fn ssim<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let s = pred.shape();
    if s != target.shape() {
        return Err(Error::config(format!("ssim between {s} and {}", target.shape())));
    }
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::config(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {}x{}", s.h, s.w)));
    }
    let k = gaussian_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let plane = s.plane();
    let (mut total, mut count) = (0.0, 0usize);
    for p in 0..s.n * s.c {
        let a: Vec<f64> = pred.data()[p * plane..(p + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let b: Vec<f64> = target.data()[p * plane..(p + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mu_a = filter_valid(&a, s.h, s.w, &k);
        let mu_b = filter_valid(&b, s.h, s.w, &k);
        let e_aa = filter_valid(&prod(&a, &a), s.h, s.w, &k);
        let e_bb = filter_valid(&prod(&b, &b), s.h, s.w, &k);
        let e_ab = filter_valid(&prod(&a, &b), s.h, s.w, &k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}
