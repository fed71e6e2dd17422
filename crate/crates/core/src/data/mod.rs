//! Image files, synthetic degradations and deterministic training data.

mod degrade;
mod pnm;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use degrade::{
    add_noise, blur, degrade, degrade_indexed, motion_kernel, BlurAngle, DegradationKind, DegradationSpec,
};
pub use pnm::{dequantize, load_image, quantize, save_image, ColorSpace, Image};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// An aligned degraded/clean tensor pair, each (n, c, h, w) in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub degraded: Tensor<f32>,
    pub clean: Tensor<f32>,
}

/// The `size`×`size` window at (`top`, `left`).
pub fn crop<T: Real>(t: &Tensor<T>, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor<T>> {
    let s = t.shape();
    if top + height > s.h || left + width > s.w {
        return Err(Error::config(format!(
            "crop {height}x{width} at ({top}, {left}) exceeds {}x{}",
            s.h, s.w
        )));
    }
    Ok(Tensor::from_fn(Shape::new(s.n, s.c, height, width), |n, c, y, x| {
        t.at(n, c, top + y, left + x)
    }))
}

/// Draws a crop position for a `patch`×`patch` window.
pub fn crop_origin(h: usize, w: usize, patch: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
    if patch == 0 || patch > h.min(w) {
        return Err(Error::config(format!("patch {patch} does not fit a {h}x{w} image")));
    }
    Ok((rng.gen_range(0..=h - patch), rng.gen_range(0..=w - patch)))
}

/// Aligned random crop of both members of a pair.
pub fn sample_patch(pair: &Pair, patch: usize, rng: &mut impl Rng) -> Result<Pair> {
    let s = pair.clean.shape();
    let (top, left) = crop_origin(s.h, s.w, patch, rng)?;
    Ok(Pair {
        degraded: crop(&pair.degraded, top, left, patch, patch)?,
        clean: crop(&pair.clean, top, left, patch, patch)?,
    })
}

/// Element `k` of the dihedral group of the square: `k % 4` quarter turns
/// counter-clockwise, then a horizontal mirror when `k >= 4`.
pub fn dihedral<T: Real>(t: &Tensor<T>, k: u8) -> Tensor<T> {
    let s = t.shape();
    let turns = k % 4;
    let (h, w) = if turns % 2 == 1 { (s.w, s.h) } else { (s.h, s.w) };
    let mirror = k % 8 >= 4;
    Tensor::from_fn(Shape::new(s.n, s.c, h, w), |n, c, y, x| {
        let x = if mirror { w - 1 - x } else { x };
        let (sy, sx) = match turns {
            0 => (y, x),
            1 => (x, s.w - 1 - y),
            2 => (s.h - 1 - y, s.w - 1 - x),
            _ => (s.h - 1 - x, y),
        };
        t.at(n, c, sy, sx)
    })
}

/// Applies one uniformly drawn dihedral transform to both members.
pub fn augment(pair: &Pair, rng: &mut impl Rng) -> Pair {
    let k = rng.gen_range(0..8u8);
    Pair {
        degraded: dihedral(&pair.degraded, k),
        clean: dihedral(&pair.clean, k),
    }
}

/// Clean RGB images, stored as (1, 3, h, w) tensors.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub names: Vec<String>,
    pub images: Vec<Tensor<f32>>,
}

impl Dataset {
    /// Every `<root>/clean/*.ppm`, in lexicographic file-name order.
    pub fn load(root: impl AsRef<Path>) -> Result<Dataset> {
        let dir = root.as_ref().join("clean");
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::config(format!("no .ppm files in {}", dir.display())));
        }
        let mut names = Vec::with_capacity(paths.len());
        let mut images = Vec::with_capacity(paths.len());
        for p in paths {
            let img = load_image(&p).map_err(|e| match e {
                Error::Format { offset, message } => Error::Format {
                    offset,
                    message: format!("{}: {message}", p.display()),
                },
                other => other,
            })?;
            names.push(p.file_name().unwrap_or_default().to_string_lossy().into_owned());
            images.push(img.to_rgb().to_tensor());
        }
        Ok(Dataset { names, images })
    }

    /// `count` generated images of size `h`×`w`.
    pub fn synthetic(count: usize, h: usize, w: usize, seed: u64) -> Dataset {
        let images = (0..count)
            .map(|i| synthetic_image(h, w, seed.wrapping_add(i as u64)).to_tensor())
            .collect();
        let names = (0..count).map(|i| format!("synthetic_{i:04}.ppm")).collect();
        Dataset { names, images }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// A training batch: per item an image, aligned crop, dihedral
    /// transform and fresh degradation, all drawn from `rng`.
    pub fn sample_batch(&self, batch: usize, patch: usize, spec: &DegradationSpec, rng: &mut impl Rng) -> Result<Pair> {
        if self.is_empty() {
            return Err(Error::config("dataset is empty"));
        }
        let mut degraded = Vec::with_capacity(batch);
        let mut clean = Vec::with_capacity(batch);
        for _ in 0..batch {
            let img = &self.images[rng.gen_range(0..self.len())];
            let s = img.shape();
            let (top, left) = crop_origin(s.h, s.w, patch, rng)?;
            let c = dihedral(&crop(img, top, left, patch, patch)?, rng.gen_range(0..8u8));
            degraded.push(degrade(&c, spec, rng));
            clean.push(c);
        }
        Ok(Pair {
            degraded: Tensor::stack(&degraded)?,
            clean: Tensor::stack(&clean)?,
        })
    }

    /// Fixed evaluation pairs: each image center-cropped so both sides are
    /// multiples of `divisor` (and at most `max_side`), degraded from the
    /// stream of its index.
    pub fn eval_pairs(&self, spec: &DegradationSpec, divisor: usize, max_side: Option<usize>) -> Result<Vec<Pair>> {
        self.images
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let s = img.shape();
                let fit = |v: usize| {
                    let v = max_side.map_or(v, |m| v.min(m));
                    v - v % divisor
                };
                let (h, w) = (fit(s.h), fit(s.w));
                if h == 0 || w == 0 {
                    return Err(Error::config(format!(
                        "{} is smaller than the network divisor {divisor}",
                        self.names[i]
                    )));
                }
                let c = crop(img, (s.h - h) / 2, (s.w - w) / 2, h, w)?;
                let (degraded, clean) = degrade_indexed(&c, spec, i as u64);
                Ok(Pair { degraded, clean })
            })
            .collect()
    }
}

/// A procedural RGB test image: a smooth color gradient overlaid with
/// flat-colored rectangles, discs and a sinusoidal texture patch.
pub fn synthetic_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
    let c0 = color(&mut rng);
    let c1 = color(&mut rng);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (sa, ca) = angle.sin_cos();

    enum Shape2 {
        Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
        Disc { cy: f64, cx: f64, r: f64 },
        Waves { cy: f64, cx: f64, r: f64, freq: f64, dir: f64 },
    }
    let n_shapes = rng.gen_range(4..9);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let (hf, wf) = (h as f64, w as f64);
        let shape = match rng.gen_range(0..3) {
            0 => {
                let (ya, yb) = (rng.gen_range(0.0..hf), rng.gen_range(0.0..hf));
                let (xa, xb) = (rng.gen_range(0.0..wf), rng.gen_range(0.0..wf));
                Shape2::Rect {
                    y0: ya.min(yb),
                    x0: xa.min(xb),
                    y1: ya.max(yb),
                    x1: xa.max(xb),
                }
            }
            1 => Shape2::Disc {
                cy: rng.gen_range(0.0..hf),
                cx: rng.gen_range(0.0..wf),
                r: rng.gen_range(2.0..(hf.min(wf) / 3.0).max(3.0)),
            },
            _ => Shape2::Waves {
                cy: rng.gen_range(0.0..hf),
                cx: rng.gen_range(0.0..wf),
                r: rng.gen_range(4.0..(hf.min(wf) / 2.5).max(5.0)),
                freq: rng.gen_range(0.2..0.9),
                dir: rng.gen_range(0.0..std::f64::consts::PI),
            },
        };
        shapes.push((shape, color(&mut rng)));
    }

    let mut data = Vec::with_capacity(h * w * 3);
    let diag = ((h * h + w * w) as f64).sqrt().max(1.0);
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
            let t = (0.5 + ((xf - w as f64 / 2.0) * ca + (yf - h as f64 / 2.0) * sa) / diag).clamp(0.0, 1.0);
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = c0[c] * (1.0 - t) + c1[c] * t;
            }
            for (shape, col) in &shapes {
                match *shape {
                    Shape2::Rect { y0, x0, y1, x1 } => {
                        if (y0..y1).contains(&yf) && (x0..x1).contains(&xf) {
                            px = *col;
                        }
                    }
                    Shape2::Disc { cy, cx, r } => {
                        if (yf - cy).powi(2) + (xf - cx).powi(2) <= r * r {
                            px = *col;
                        }
                    }
                    Shape2::Waves { cy, cx, r, freq, dir } => {
                        if (yf - cy).powi(2) + (xf - cx).powi(2) <= r * r {
                            let (sd, cd) = dir.sin_cos();
                            let s = 0.5 + 0.5 * ((xf * cd + yf * sd) * freq).sin();
                            for c in 0..3 {
                                px[c] = col[c] * s + px[c] * (1.0 - s);
                            }
                        }
                    }
                }
            }
            data.extend(px.iter().map(|&v| quantize(v)));
        }
    }
    Image::new(h, w, ColorSpace::Rgb, data).expect("sizes agree")
}

/// Writes `count` synthetic images to `<root>/clean/`.
pub fn write_synthetic_dataset(root: impl AsRef<Path>, count: usize, h: usize, w: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let dir = root.as_ref().join("clean");
    fs::create_dir_all(&dir)?;
    (0..count)
        .map(|i| {
            let p = dir.join(format!("synthetic_{i:04}.ppm"));
            save_image(&synthetic_image(h, w, seed.wrapping_add(i as u64)), &p)?;
            Ok(p)
        })
        .collect()
}
