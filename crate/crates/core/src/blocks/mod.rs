//! Gating and attention primitives and the three block families.
//!
//! All three families share one skeleton of two residual sub-blocks:
//!
//! ```text
//! y = x + β ⊙ conv(attn(mix(dwconv(conv(norm(x))))))
//! z = y + γ ⊙ conv(mix(conv(norm(y))))
//! ```
//!
//! and differ only in which components fill the slots:
//!
//! | kind     | norm | mix        | attn |
//! |----------|------|------------|------|
//! | plain    | -    | ReLU       | -    |
//! | baseline | LN   | GELU       | CA   |
//! | nafnet   | LN   | SimpleGate | SCA  |
//!
//! β and γ are per-channel and start at zero, so every fresh block is the
//! identity map.

mod attention;
mod gate;
pub mod layers;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use attention::{
    bottleneck_width, channel_attention, simplified_channel_attention, ChannelAttention, SimplifiedChannelAttention,
};
pub use gate::{gate_general, simple_gate, GateSpec, LinearMap};
use layers::{register, Conv, Init, LayerNorm};

use crate::error::{Error, Result};
use crate::tensor::{Activation, Graph, ParamId, ParamStore, Real, Shape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Plain,
    Baseline,
    NafNet,
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Plain => "plain",
            BlockKind::Baseline => "baseline",
            BlockKind::NafNet => "nafnet",
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "plain" | "plainnet" => Ok(BlockKind::Plain),
            "baseline" => Ok(BlockKind::Baseline),
            "nafnet" | "naf" => Ok(BlockKind::NafNet),
            other => Err(Error::config(format!("unknown block kind `{other}`"))),
        }
    }
}

/// The nonlinearity slot between convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mixer {
    /// Elementwise activation; keeps the channel count.
    Act(Activation),
    /// Split-channel gate with the given σ on the second half; halves the channel count.
    Gate(Activation),
}

impl Mixer {
    fn out_channels(self, c: usize) -> usize {
        match self {
            Mixer::Act(_) => c,
            Mixer::Gate(_) => c / 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Attention {
    None,
    Ca,
    Sca,
}

impl FromStr for Attention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "off" => Ok(Attention::None),
            "ca" => Ok(Attention::Ca),
            "sca" => Ok(Attention::Sca),
            other => Err(Error::config(format!("unknown attention `{other}`"))),
        }
    }
}

impl fmt::Display for Attention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Attention::None => "none",
            Attention::Ca => "ca",
            Attention::Sca => "sca",
        })
    }
}

/// Declarative description of a block. `kind` picks the preset; the component
/// fields may be overridden individually for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BlockConfig {
    pub kind: BlockKind,
    pub norm: bool,
    pub mixer: Mixer,
    pub attention: Attention,
    pub dw_expand: usize,
    pub ffn_expand: usize,
    pub ca_reduction: usize,
    pub dw_kernel: usize,
}

impl BlockConfig {
    pub fn preset(kind: BlockKind) -> Self {
        let (norm, mixer, attention) = match kind {
            BlockKind::Plain => (false, Mixer::Act(Activation::Relu), Attention::None),
            BlockKind::Baseline => (true, Mixer::Act(Activation::GeluExact), Attention::Ca),
            BlockKind::NafNet => (true, Mixer::Gate(Activation::Identity), Attention::Sca),
        };
        BlockConfig {
            kind,
            norm,
            mixer,
            attention,
            dw_expand: 2,
            ffn_expand: 2,
            // CA on m channels costs 2·m·(m/r) MACs; r = 2 equals SCA's m·m.
            ca_reduction: 2,
            dw_kernel: 3,
        }
    }

    pub fn plain() -> Self {
        Self::preset(BlockKind::Plain)
    }

    pub fn baseline() -> Self {
        Self::preset(BlockKind::Baseline)
    }

    pub fn nafnet() -> Self {
        Self::preset(BlockKind::NafNet)
    }

    /// Channels entering the attention slot of the first branch.
    pub fn attention_channels(&self, width: usize) -> usize {
        self.mixer.out_channels(width * self.dw_expand)
    }

    /// Channels leaving the mixer of the feed-forward branch.
    pub fn ffn_mixed_channels(&self, width: usize) -> usize {
        self.mixer.out_channels(width * self.ffn_expand)
    }

    pub fn validate(&self, width: usize) -> Result<()> {
        if width == 0 {
            return Err(Error::config("block width must be positive"));
        }
        if self.dw_expand == 0 || self.ffn_expand == 0 {
            return Err(Error::config("expansion factors must be positive"));
        }
        if self.dw_kernel % 2 == 0 {
            return Err(Error::config(format!("depthwise kernel must be odd, got {}", self.dw_kernel)));
        }
        if let Mixer::Gate(_) = self.mixer {
            for (what, c) in [("dw", width * self.dw_expand), ("ffn", width * self.ffn_expand)] {
                if c % 2 != 0 {
                    return Err(Error::config(format!("{what} expansion gives {c} channels; the gate needs an even count")));
                }
            }
        }
        if self.attention == Attention::Ca {
            bottleneck_width(self.attention_channels(width), self.ca_reduction)?;
        }
        Ok(())
    }
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self::nafnet()
    }
}

#[derive(Clone, Debug)]
enum AttentionParams {
    Ca(ChannelAttention),
    Sca(SimplifiedChannelAttention),
}

/// One block of any family with its registered parameters.
#[derive(Clone, Debug)]
pub struct Block {
    pub cfg: BlockConfig,
    pub width: usize,
    norm1: Option<LayerNorm>,
    conv1: Conv,
    conv2: Conv,
    attention: Option<AttentionParams>,
    conv3: Conv,
    norm2: Option<LayerNorm>,
    conv4: Conv,
    conv5: Conv,
    /// Residual scale of the spatial branch.
    pub beta: ParamId,
    /// Residual scale of the feed-forward branch.
    pub gamma: ParamId,
}

impl Block {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize, cfg: BlockConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate(width)?;
        let dw = width * cfg.dw_expand;
        let att = cfg.attention_channels(width);
        let ffn = width * cfg.ffn_expand;
        let ffn_mixed = cfg.ffn_mixed_channels(width);

        let norm1 = cfg.norm.then(|| LayerNorm::new(store, &format!("{name}.norm1"), width, rng)).transpose()?;
        let conv1 = Conv::pointwise(store, &format!("{name}.conv1"), width, dw, rng)?;
        let conv2 = Conv::depthwise(store, &format!("{name}.conv2"), dw, cfg.dw_kernel, rng)?;
        let attention = match cfg.attention {
            Attention::None => None,
            Attention::Ca => Some(AttentionParams::Ca(ChannelAttention::new(
                store,
                &format!("{name}.ca"),
                att,
                cfg.ca_reduction,
                rng,
            )?)),
            Attention::Sca => Some(AttentionParams::Sca(SimplifiedChannelAttention::new(
                store,
                &format!("{name}.sca"),
                att,
                rng,
            )?)),
        };
        let conv3 = Conv::pointwise(store, &format!("{name}.conv3"), att, width, rng)?;
        let norm2 = cfg.norm.then(|| LayerNorm::new(store, &format!("{name}.norm2"), width, rng)).transpose()?;
        let conv4 = Conv::pointwise(store, &format!("{name}.conv4"), width, ffn, rng)?;
        let conv5 = Conv::pointwise(store, &format!("{name}.conv5"), ffn_mixed, width, rng)?;
        let scale_shape = Shape::new(1, width, 1, 1);
        let dims = vec![1, width, 1, 1];
        let beta = register(store, format!("{name}.beta"), dims.clone(), scale_shape, Init::Zeros, 1, rng)?;
        let gamma = register(store, format!("{name}.gamma"), dims, scale_shape, Init::Zeros, 1, rng)?;
        Ok(Block {
            cfg,
            width,
            norm1,
            conv1,
            conv2,
            attention,
            conv3,
            norm2,
            conv4,
            conv5,
            beta,
            gamma,
        })
    }

    fn mix<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        match self.cfg.mixer {
            Mixer::Act(a) => g.activation(x, a),
            Mixer::Gate(Activation::Identity) => simple_gate(g, x),
            Mixer::Gate(sigma) => gate_general(g, store, x, &GateSpec::with_sigma(sigma)),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let c = g.shape(x).c;
        if c != self.width {
            return Err(Error::config(format!("block of width {} got {c} channels", self.width)));
        }

        let mut h = x;
        if let Some(n) = &self.norm1 {
            h = n.forward(g, store, h)?;
        }
        h = self.conv1.forward(g, store, h)?;
        h = self.conv2.forward(g, store, h)?;
        h = self.mix(g, store, h)?;
        h = match &self.attention {
            None => h,
            Some(AttentionParams::Ca(ca)) => ca.forward(g, store, h)?,
            Some(AttentionParams::Sca(sca)) => sca.forward(g, store, h)?,
        };
        h = self.conv3.forward(g, store, h)?;
        let beta = g.param(store, self.beta)?;
        let h = g.scale_by_channel(h, beta)?;
        let y = g.add(x, h)?;

        let mut h = y;
        if let Some(n) = &self.norm2 {
            h = n.forward(g, store, h)?;
        }
        h = self.conv4.forward(g, store, h)?;
        h = self.mix(g, store, h)?;
        h = self.conv5.forward(g, store, h)?;
        let gamma = g.param(store, self.gamma)?;
        let h = g.scale_by_channel(h, gamma)?;
        g.add(y, h)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    fn input(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn fresh_blocks_are_identity() {
        for cfg in [BlockConfig::plain(), BlockConfig::baseline(), BlockConfig::nafnet()] {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut store = ParamStore::new();
            let block = Block::new(&mut store, "b", 4, cfg, &mut rng).unwrap();
            let xt = input(Shape::new(2, 4, 5, 6), 8);
            let mut g = Graph::new();
            let x = g.input(xt.clone()).unwrap();
            let y = block.forward(&mut g, &store, x).unwrap();
            assert_eq!(g.value(y), &xt, "{:?}", cfg.kind);
        }
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let block = Block::new(&mut store, "b", 4, BlockConfig::nafnet(), &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.input(input(Shape::new(1, 3, 4, 4), 1)).unwrap();
        assert!(matches!(block.forward(&mut g, &store, x), Err(Error::Config(_))));
    }

    #[test]
    fn odd_gate_channels_are_rejected() {
        let cfg = BlockConfig {
            dw_expand: 1,
            ..BlockConfig::nafnet()
        };
        assert!(matches!(cfg.validate(3), Err(Error::Config(_))));
        assert!(cfg.validate(4).is_ok());
    }

    #[test]
    fn naf_block_records_no_nonlinear_activation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let block = Block::new(&mut store, "b", 4, BlockConfig::nafnet(), &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.input(input(Shape::new(1, 4, 4, 4), 3)).unwrap();
        block.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.counters().nonlinear_activations(), 0);

        let block = Block::new(&mut store, "c", 4, BlockConfig::baseline(), &mut rng).unwrap();
        block.forward(&mut g, &store, x).unwrap();
        // two GELUs, one ReLU and one sigmoid inside CA
        assert_eq!(g.counters().nonlinear_activations(), 4);
    }

    #[test]
    fn parameter_names_follow_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        Block::new(&mut store, "blk", 8, BlockConfig::nafnet(), &mut rng).unwrap();
        let names: Vec<_> = store.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "blk.norm1.weight",
                "blk.norm1.bias",
                "blk.conv1.weight",
                "blk.conv1.bias",
                "blk.conv2.weight",
                "blk.conv2.bias",
                "blk.sca.fc.weight",
                "blk.sca.fc.bias",
                "blk.conv3.weight",
                "blk.conv3.bias",
                "blk.norm2.weight",
                "blk.norm2.bias",
                "blk.conv4.weight",
                "blk.conv4.bias",
                "blk.conv5.weight",
                "blk.conv5.bias",
                "blk.beta",
                "blk.gamma",
            ]
        );
        let conv3 = store.get(store.id_of("blk.conv3.weight").unwrap());
        assert_eq!(conv3.dims, vec![8, 8, 1, 1]);
    }
}
