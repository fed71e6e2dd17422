//! Binary netpbm images: PGM (`P5`) and PPM (`P6`) with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ColorSpace {
    Gray,
    Rgb,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Gray => 1,
            ColorSpace::Rgb => 3,
        }
    }

    fn magic(self) -> &'static [u8; 2] {
        match self {
            ColorSpace::Gray => b"P5",
            ColorSpace::Rgb => b"P6",
        }
    }
}

/// An 8-bit image with interleaved samples in (h, w, c) order.
#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub color: ColorSpace,
    pub data: Vec<u8>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Image({}x{} {:?})", self.height, self.width, self.color)
    }
}

/// Maps a sample to [0, 1].
#[inline]
pub fn dequantize(v: u8) -> f64 {
    v as f64 / 255.0
}

/// Maps a [0, 1] value to the nearest sample, rounding halves up and clamping.
#[inline]
pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

impl Image {
    pub fn new(height: usize, width: usize, color: ColorSpace, data: Vec<u8>) -> Result<Self> {
        let want = height * width * color.channels();
        if data.len() != want {
            return Err(Error::config(format!(
                "{height}x{width} {color:?} image needs {want} samples, got {}",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            color,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.color.channels()
    }

    #[inline]
    pub fn sample(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels() + c]
    }

    /// Gray images replicate their single channel.
    pub fn to_rgb(&self) -> Image {
        match self.color {
            ColorSpace::Rgb => self.clone(),
            ColorSpace::Gray => Image {
                height: self.height,
                width: self.width,
                color: ColorSpace::Rgb,
                data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
            },
        }
    }

    /// (1, c, h, w) tensor with samples mapped to [0, 1].
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let c = self.channels();
        Tensor::from_fn(Shape::new(1, c, self.height, self.width), |_, ch, y, x| {
            T::from_f64_lossy(dequantize(self.sample(y, x, ch)))
        })
    }

    /// Quantizes batch item 0 of a (n, c, h, w) tensor with c ∈ {1, 3}.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Image> {
        let s = t.shape();
        let color = match s.c {
            1 => ColorSpace::Gray,
            3 => ColorSpace::Rgb,
            c => return Err(Error::config(format!("cannot store {c} channels as an image"))),
        };
        if s.n == 0 {
            return Err(Error::config("empty batch"));
        }
        let mut data = Vec::with_capacity(s.c * s.plane());
        for y in 0..s.h {
            for x in 0..s.w {
                for c in 0..s.c {
                    data.push(quantize(t.at(0, c, y, x).as_f64()));
                }
            }
        }
        Image::new(s.h, s.w, color, data)
    }

    /// Canonical encoding: `P6\n<w> <h>\n255\n` followed by the samples.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() + 20);
        out.extend_from_slice(self.color.magic());
        out.extend_from_slice(format!("\n{} {}\n255\n", self.width, self.height).as_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Image> {
        let mut p = Parser { bytes, pos: 0 };
        let color = match bytes.get(..2) {
            Some(b"P5") => ColorSpace::Gray,
            Some(b"P6") => ColorSpace::Rgb,
            _ => return Err(Error::format(0, "expected magic `P5` or `P6`")),
        };
        p.pos = 2;
        let width = p.header_int("width")?;
        let height = p.header_int("height")?;
        let maxval = p.header_int("maxval")?;
        if maxval != 255 {
            return Err(Error::Unsupported(format!("maxval {maxval}; only 255 is supported")));
        }
        match bytes.get(p.pos) {
            Some(b) if b.is_ascii_whitespace() => p.pos += 1,
            _ => return Err(Error::format(p.pos, "expected one whitespace byte after maxval")),
        }
        if width == 0 || height == 0 {
            return Err(Error::format(p.pos, format!("empty image {width}x{height}")));
        }
        let want = width * height * color.channels();
        let have = bytes.len() - p.pos;
        if have < want {
            return Err(Error::format(
                p.pos,
                format!("payload truncated: expected {want} bytes, found {have}"),
            ));
        }
        if have > want {
            return Err(Error::format(p.pos + want, format!("{} trailing bytes after payload", have - want)));
        }
        Image::new(height, width, color, bytes[p.pos..].to_vec())
    }
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn header_int(&mut self, what: &str) -> Result<usize> {
        let before = self.pos;
        self.skip_space_and_comments();
        if self.pos == before {
            return Err(Error::format(self.pos, format!("expected whitespace before {what}")));
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(start, format!("expected decimal {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::format(start, format!("{what} out of range")))
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    Image::decode(&fs::read(path)?)
}

pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, img.encode())?;
    Ok(())
}
