//! The single-stage U-shaped restoration network and its compute accounting.
//!
//! ```text
//! x ─ intro ─ enc₀ ─ down ─ enc₁ ─ down ─ … ─ mid ─ … ─ up ─(+)─ dec₁ ─ up ─(+)─ dec₀ ─ ending ─(+)─ y
//!              └──────────────────────────────────────────┘            │            │
//!                             skip (additive)                          └── skip ────┘    x ──┘
//! ```
//!
//! Widths double at every downsample and halve at every upsample. With the
//! residual scales of every block at zero and the ending convolution zeroed,
//! a fresh model is the identity map.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::layers::{Conv, Init};
use crate::blocks::{Attention, Block, BlockConfig};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

/// Image channels entering and leaving the network.
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArchConfig {
    pub width: usize,
    pub enc_blocks: Vec<usize>,
    pub mid_blocks: usize,
    /// Decoder levels in execution order, deepest first.
    pub dec_blocks: Vec<usize>,
    pub block: BlockConfig,
    pub global_residual: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            width: 32,
            enc_blocks: vec![2, 2, 4, 8],
            mid_blocks: 12,
            dec_blocks: vec![2, 2, 2, 2],
            block: BlockConfig::nafnet(),
            global_residual: true,
        }
    }
}

impl ArchConfig {
    /// The 36-block layout at a given width.
    pub fn with_width(width: usize) -> Self {
        ArchConfig {
            width,
            ..Self::default()
        }
    }

    /// Width 16 with 7 blocks.
    pub fn lite() -> Self {
        ArchConfig {
            width: 16,
            enc_blocks: vec![1, 1, 1, 1],
            mid_blocks: 1,
            dec_blocks: vec![0, 0, 1, 1],
            ..Self::default()
        }
    }

    /// Width 8 with 9 blocks, small enough to train on a CPU.
    pub fn toy() -> Self {
        ArchConfig {
            width: 8,
            enc_blocks: vec![1, 1, 1, 1],
            mid_blocks: 1,
            dec_blocks: vec![1, 1, 1, 1],
            ..Self::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.enc_blocks.len()
    }

    pub fn total_blocks(&self) -> usize {
        self.enc_blocks.iter().sum::<usize>() + self.mid_blocks + self.dec_blocks.iter().sum::<usize>()
    }

    /// Spatial sizes must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.levels()
    }

    /// Feature width at encoder level `level` (level `levels()` is the middle).
    pub fn level_width(&self, level: usize) -> usize {
        self.width << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::config("arch width must be positive"));
        }
        if self.enc_blocks.len() != self.dec_blocks.len() {
            return Err(Error::config(format!(
                "{} encoder levels but {} decoder levels",
                self.enc_blocks.len(),
                self.dec_blocks.len()
            )));
        }
        if self.levels() > 16 {
            return Err(Error::config(format!("{} levels is too deep", self.levels())));
        }
        for level in 0..=self.levels() {
            self.block.validate(self.level_width(level))?;
        }
        Ok(())
    }

    /// Checks that an `h`×`w` input fits the level structure.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let d = self.divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            let pad = |v: usize| (d - v % d) % d;
            return Err(Error::config(format!(
                "input {h}x{w} must have sides divisible by {d}; pad by {} rows and {} columns",
                pad(h),
                pad(w)
            )));
        }
        Ok(())
    }
}

impl fmt::Display for ArchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} width {} enc {:?} mid {} dec {:?}",
            self.block.kind, self.width, self.enc_blocks, self.mid_blocks, self.dec_blocks
        )
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    blocks: Vec<Block>,
    down: Conv,
}

#[derive(Clone, Debug)]
struct Decoder {
    up: Conv,
    blocks: Vec<Block>,
}

/// A built network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: ArchConfig,
    pub params: ParamStore<T>,
    intro: Conv,
    encoders: Vec<Encoder>,
    middle: Vec<Block>,
    decoders: Vec<Decoder>,
    ending: Conv,
}

fn stack<T: Real>(store: &mut ParamStore<T>, prefix: &str, n: usize, width: usize, cfg: BlockConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Block>> {
    (0..n)
        .map(|i| Block::new(store, &format!("{prefix}.block.{i}"), width, cfg, rng))
        .collect()
}

/// Builds a model with parameters drawn deterministically from `seed`.
pub fn build_model<T: Real>(cfg: &ArchConfig, seed: u64) -> Result<Model<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let c0 = cfg.width;
    let intro = Conv::dense(&mut store, "intro", IMAGE_CHANNELS, c0, 3, 1, true, Init::KaimingUniform, &mut rng)?;

    let mut encoders = Vec::with_capacity(cfg.levels());
    for (i, &n) in cfg.enc_blocks.iter().enumerate() {
        let c = cfg.level_width(i);
        let blocks = stack(&mut store, &format!("enc.{i}"), n, c, cfg.block, &mut rng)?;
        let down = Conv::dense(&mut store, &format!("enc.{i}.down"), c, 2 * c, 2, 2, true, Init::KaimingUniform, &mut rng)?;
        encoders.push(Encoder { blocks, down });
    }

    let middle = stack(&mut store, "mid", cfg.mid_blocks, cfg.level_width(cfg.levels()), cfg.block, &mut rng)?;

    let mut decoders = Vec::with_capacity(cfg.levels());
    for (i, &n) in cfg.dec_blocks.iter().enumerate() {
        let level = cfg.levels() - 1 - i;
        let c = cfg.level_width(level);
        let up = Conv::dense(&mut store, &format!("dec.{i}.up"), 2 * c, 4 * c, 1, 1, false, Init::KaimingUniform, &mut rng)?;
        let blocks = stack(&mut store, &format!("dec.{i}"), n, c, cfg.block, &mut rng)?;
        decoders.push(Decoder { up, blocks });
    }

    let ending = Conv::dense(&mut store, "ending", c0, IMAGE_CHANNELS, 3, 1, true, Init::Zeros, &mut rng)?;

    Ok(Model {
        cfg: cfg.clone(),
        params: store,
        intro,
        encoders,
        middle,
        decoders,
        ending,
    })
}

impl<T: Real> Model<T> {
    /// Records a forward pass of `x` (shape (n, 3, h, w)) on `g`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.forward_with(g, &self.params, x)
    }

    /// [`Model::forward`] reading parameter values from `store`, which must
    /// have this model's layout.
    pub fn forward_with(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.c != IMAGE_CHANNELS {
            return Err(Error::config(format!("model expects {IMAGE_CHANNELS} channels, got {}", s.c)));
        }
        self.cfg.check_input(s.h, s.w)?;

        let mut h = self.intro.forward(g, store, x)?;
        let mut skips = Vec::with_capacity(self.encoders.len());
        for enc in &self.encoders {
            for b in &enc.blocks {
                h = b.forward(g, store, h)?;
            }
            skips.push(h);
            h = enc.down.forward(g, store, h)?;
        }
        for b in &self.middle {
            h = b.forward(g, store, h)?;
        }
        for dec in &self.decoders {
            h = dec.up.forward(g, store, h)?;
            h = g.pixel_shuffle(h, 2)?;
            let skip = skips.pop().expect("one skip per level");
            h = g.add(h, skip)?;
            for b in &dec.blocks {
                h = b.forward(g, store, h)?;
            }
        }
        h = self.ending.forward(g, store, h)?;
        if self.cfg.global_residual {
            h = g.add(h, x)?;
        }
        Ok(h)
    }

    /// Forward pass without keeping the tape.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.input(x.clone())?;
        let y = self.forward(&mut g, xv)?;
        Ok(g.take_value(y))
    }

    /// Every block in execution order.
    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.encoders
            .iter()
            .flat_map(|e| e.blocks.iter())
            .chain(self.middle.iter())
            .chain(self.decoders.iter().flat_map(|d| d.blocks.iter()))
    }

    /// The same model with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            intro: self.intro.clone(),
            encoders: self.encoders.clone(),
            middle: self.middle.clone(),
            decoders: self.decoders.clone(),
            ending: self.ending.clone(),
        }
    }
}

/// MACs of one layer at a given input size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerMacs {
    pub name: String,
    /// `c_in→c_out k×k @ h×w` style description.
    pub detail: String,
    pub macs: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MacsReport {
    pub layers: Vec<LayerMacs>,
}

impl MacsReport {
    pub fn total(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    pub fn gmacs(&self) -> f64 {
        self.total() as f64 / 1e9
    }

    fn conv(&mut self, name: String, c_in: usize, c_out: usize, k: usize, h_out: usize, w_out: usize) {
        self.layers.push(LayerMacs {
            name,
            detail: format!("{c_in}->{c_out} {k}x{k} @ {h_out}x{w_out}"),
            macs: (h_out * w_out * c_in * c_out * k * k) as u64,
        });
    }

    fn depthwise(&mut self, name: String, c: usize, k: usize, h: usize, w: usize) {
        self.layers.push(LayerMacs {
            name,
            detail: format!("dw {c} {k}x{k} @ {h}x{w}"),
            macs: (h * w * c * k * k) as u64,
        });
    }

    fn fc(&mut self, name: String, c_in: usize, c_out: usize) {
        self.layers.push(LayerMacs {
            name,
            detail: format!("fc {c_in}->{c_out}"),
            macs: (c_in * c_out) as u64,
        });
    }

    fn block(&mut self, name: &str, c: usize, cfg: &BlockConfig, h: usize, w: usize) {
        let dw = c * cfg.dw_expand;
        let att = cfg.attention_channels(c);
        let ffn = c * cfg.ffn_expand;
        let ffn_mixed = cfg.ffn_mixed_channels(c);
        self.conv(format!("{name}.conv1"), c, dw, 1, h, w);
        self.depthwise(format!("{name}.conv2"), dw, cfg.dw_kernel, h, w);
        match cfg.attention {
            Attention::None => {}
            Attention::Ca => {
                let hidden = att / cfg.ca_reduction;
                self.fc(format!("{name}.ca.fc1"), att, hidden);
                self.fc(format!("{name}.ca.fc2"), hidden, att);
            }
            Attention::Sca => self.fc(format!("{name}.sca.fc"), att, att),
        }
        self.conv(format!("{name}.conv3"), att, c, 1, h, w);
        self.conv(format!("{name}.conv4"), c, ffn, 1, h, w);
        self.conv(format!("{name}.conv5"), ffn_mixed, c, 1, h, w);
    }
}

/// Analytic multiply-accumulate count of one forward pass on a single
/// `h`×`w` image. Normalizations, activations, gates, pooling and additions
/// are not counted.
pub fn count_macs(cfg: &ArchConfig, h: usize, w: usize) -> Result<MacsReport> {
    cfg.validate()?;
    cfg.check_input(h, w)?;
    let mut r = MacsReport::default();
    r.conv("intro".into(), IMAGE_CHANNELS, cfg.width, 3, h, w);
    for (i, &n) in cfg.enc_blocks.iter().enumerate() {
        let c = cfg.level_width(i);
        let (lh, lw) = (h >> i, w >> i);
        for b in 0..n {
            r.block(&format!("enc.{i}.block.{b}"), c, &cfg.block, lh, lw);
        }
        r.conv(format!("enc.{i}.down"), c, 2 * c, 2, lh / 2, lw / 2);
    }
    let levels = cfg.levels();
    for b in 0..cfg.mid_blocks {
        r.block(&format!("mid.block.{b}"), cfg.level_width(levels), &cfg.block, h >> levels, w >> levels);
    }
    for (i, &n) in cfg.dec_blocks.iter().enumerate() {
        let level = levels - 1 - i;
        let c = cfg.level_width(level);
        let (lh, lw) = (h >> level, w >> level);
        r.conv(format!("dec.{i}.up"), 2 * c, 4 * c, 1, lh / 2, lw / 2);
        for b in 0..n {
            r.block(&format!("dec.{i}.block.{b}"), c, &cfg.block, lh, lw);
        }
    }
    r.conv("ending".into(), cfg.width, IMAGE_CHANNELS, 3, h, w);
    Ok(r)
}

fn block_params(c: usize, cfg: &BlockConfig) -> usize {
    let dw = c * cfg.dw_expand;
    let att = cfg.attention_channels(c);
    let ffn = c * cfg.ffn_expand;
    let ffn_mixed = cfg.ffn_mixed_channels(c);
    let norms = if cfg.norm { 4 * c } else { 0 };
    let attention = match cfg.attention {
        Attention::None => 0,
        Attention::Ca => {
            let hidden = att / cfg.ca_reduction;
            att * hidden + hidden + hidden * att + att
        }
        Attention::Sca => att * att + att,
    };
    norms
        + (c * dw + dw)
        + (dw * cfg.dw_kernel * cfg.dw_kernel + dw)
        + attention
        + (att * c + c)
        + (c * ffn + ffn)
        + (ffn_mixed * c + c)
        + 2 * c
}

/// Analytic count of trainable scalars.
pub fn count_params(cfg: &ArchConfig) -> Result<usize> {
    cfg.validate()?;
    let mut total = IMAGE_CHANNELS * cfg.width * 9 + cfg.width;
    for (i, &n) in cfg.enc_blocks.iter().enumerate() {
        let c = cfg.level_width(i);
        total += n * block_params(c, &cfg.block);
        total += c * 2 * c * 4 + 2 * c;
    }
    total += cfg.mid_blocks * block_params(cfg.level_width(cfg.levels()), &cfg.block);
    for (i, &n) in cfg.dec_blocks.iter().enumerate() {
        let c = cfg.level_width(cfg.levels() - 1 - i);
        total += 2 * c * 4 * c;
        total += n * block_params(c, &cfg.block);
    }
    total += cfg.width * IMAGE_CHANNELS * 9 + IMAGE_CHANNELS;
    Ok(total)
}
