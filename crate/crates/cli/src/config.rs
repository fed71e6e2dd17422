//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nafnet::arch::ArchConfig;
use nafnet::blocks::{Attention, BlockConfig, BlockKind, Mixer};
use nafnet::data::{BlurAngle, DegradationKind, DegradationSpec};
use nafnet::tensor::Activation;
use nafnet::train::ablation::{DivergenceRule, Table};
use nafnet::train::{AdamConfig, TrainConfig};
use nafnet::{Error, Result};

/// Every recognized key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("arch.width", "32", "channels of the first level"),
    ("arch.enc_blocks", "2,2,4,8", "blocks per encoder level, shallowest first"),
    ("arch.mid_blocks", "12", "blocks at the bottleneck"),
    ("arch.dec_blocks", "2,2,2,2", "blocks per decoder level, deepest first"),
    ("arch.global_residual", "true", "add the input to the output"),
    ("block.kind", "nafnet", "preset: plain | baseline | nafnet"),
    ("block.norm", "default", "layer norm before each branch: default | true | false"),
    ("block.mixer", "default", "nonlinearity slot: default | act | gate"),
    ("block.sigma", "default", "activation of the mixer: default | identity | relu | gelu | gelu_tanh | sigmoid | silu | normal_cdf"),
    ("block.attn", "default", "attention: default | none | ca | sca"),
    ("block.dw_expand", "2", "expansion before the depthwise conv"),
    ("block.ffn_expand", "2", "expansion of the feed-forward branch"),
    ("block.ca_reduction", "2", "squeeze ratio of channel attention"),
    ("train.lr_init", "1e-3", "initial learning rate"),
    ("train.lr_final", "1e-6", "learning rate after cosine decay"),
    ("train.beta1", "0.9", "Adam beta1"),
    ("train.beta2", "0.9", "Adam beta2"),
    ("train.weight_decay", "0", "decoupled weight decay"),
    ("train.total_iters", "2000", "optimization steps"),
    ("train.batch_size", "8", "patches per step"),
    ("train.patch_size", "48", "square patch side"),
    ("train.seed", "0", "seed of weights, batches and augmentation"),
    ("train.grad_clip", "none", "global gradient norm limit, or none"),
    ("train.eval_every", "auto", "iterations between evaluations, or auto (total/20)"),
    ("data.kind", "gaussian_noise", "gaussian_noise | motion_blur | blur_plus_noise"),
    ("data.sigma", "25", "noise level on the 0..255 scale; `lo,hi` samples uniformly"),
    ("data.kernel_len", "9", "motion blur length in pixels"),
    ("data.angle", "random", "motion blur angle in degrees, or random"),
    ("data.seed", "0", "seed of the degradation streams"),
    ("data.root", "", "training set directory holding clean/*.ppm; empty for synthetic"),
    ("data.synthetic_count", "32", "synthetic training images"),
    ("data.synthetic_size", "96", "side of synthetic training images"),
    ("data.eval_root", "", "evaluation directory holding clean/*.ppm; empty for synthetic"),
    ("data.eval_count", "4", "synthetic evaluation images"),
    ("data.eval_size", "64", "side of synthetic evaluation images"),
    ("data.eval_max_side", "none", "crop evaluation images to this side, or none"),
    ("macs.height", "256", "input height for MACs counting"),
    ("macs.width", "256", "input width for MACs counting"),
    ("ablate.tables", "1,2,3,4", "tables to run"),
    ("ablate.width", "10", "width of the budget-defining NAFNet of tables 1, 2 and 4"),
    ("ablate.enc_blocks", "1,1,1,1", "encoder layout of tables 1, 2 and 4"),
    ("ablate.mid_blocks", "1", "bottleneck blocks of tables 1, 2 and 4"),
    ("ablate.dec_blocks", "1,1,1,1", "decoder layout of tables 1, 2 and 4"),
    ("ablate.depth_width", "32", "width of the 36-block reference of the block-count sweep"),
    ("ablate.tail", "0.1", "fraction of final iterations compared by the divergence flag"),
    ("ablate.margin_db", "0", "loss excess over the first iteration that counts as diverged"),
    ("gradcheck.seed", "7", "seed of inputs and projections"),
    ("gradcheck.step", "1e-5", "central difference step"),
    ("gradcheck.tolerance", "1e-4", "largest accepted relative error"),
];

/// Help text listing every key.
pub fn keys_help() -> String {
    let mut s = String::from("Configuration keys (set in --config FILE or as --key value):\n");
    for (key, default, doc) in KEYS {
        let default = if default.is_empty() { "\"\"" } else { default };
        let _ = writeln!(s, "  {key:<22} {default:<16} {doc}");
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {v}: {e}")))
}

fn optional<T: FromStr>(key: &str, v: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match v.trim() {
        "none" | "auto" | "" => Ok(None),
        s => parse(key, s).map(Some),
    }
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(key, s)).collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key `{key}` (see --help for the list)"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("key from KEYS")
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn merge_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{source}:{}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{source}:{}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.merge_text(&text, &path.display().to_string())
    }

    /// Applies `--key value` and `--key=value` pairs.
    pub fn merge_args(&mut self, args: &[String]) -> Result<()> {
        let mut it = args.iter();
        while let Some(a) = it.next() {
            let Some(flag) = a.strip_prefix("--") else {
                return Err(Error::Config(format!("unexpected argument `{a}`")));
            };
            match flag.split_once('=') {
                Some((k, v)) => self.set(k, v)?,
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| Error::Config(format!("missing value for --{flag}")))?;
                    self.set(flag, v)?;
                }
            }
        }
        Ok(())
    }

    /// The fully resolved configuration in the file syntax.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut section = "";
        for (key, _, doc) in KEYS {
            let head = key.split('.').next().unwrap_or("");
            if head != section {
                if !section.is_empty() {
                    s.push('\n');
                }
                section = head;
            }
            let _ = writeln!(s, "# {doc}\n{key} = {}", self.get(key));
        }
        s
    }

    fn usize(&self, key: &str) -> Result<usize> {
        parse(key, self.get(key))
    }

    fn f64(&self, key: &str) -> Result<f64> {
        parse(key, self.get(key))
    }

    fn u64(&self, key: &str) -> Result<u64> {
        parse(key, self.get(key))
    }

    fn bool(&self, key: &str) -> Result<bool> {
        parse(key, self.get(key))
    }

    pub fn block(&self) -> Result<BlockConfig> {
        let kind: BlockKind = parse("block.kind", self.get("block.kind"))?;
        let mut b = BlockConfig::preset(kind);
        match self.get("block.norm") {
            "default" => {}
            v => b.norm = parse("block.norm", v)?,
        }
        let sigma = match self.get("block.sigma") {
            "default" => None,
            v => Some(parse::<Activation>("block.sigma", v)?),
        };
        let current = match b.mixer {
            Mixer::Act(a) | Mixer::Gate(a) => a,
        };
        b.mixer = match self.get("block.mixer") {
            "default" => match b.mixer {
                Mixer::Act(_) => Mixer::Act(sigma.unwrap_or(current)),
                Mixer::Gate(_) => Mixer::Gate(sigma.unwrap_or(current)),
            },
            "act" => Mixer::Act(sigma.unwrap_or(Activation::GeluExact)),
            "gate" => Mixer::Gate(sigma.unwrap_or(Activation::Identity)),
            v => return Err(Error::Config(format!("block.mixer = {v}: expected default, act or gate"))),
        };
        match self.get("block.attn") {
            "default" => {}
            v => b.attention = parse::<Attention>("block.attn", v)?,
        }
        b.dw_expand = self.usize("block.dw_expand")?;
        b.ffn_expand = self.usize("block.ffn_expand")?;
        b.ca_reduction = self.usize("block.ca_reduction")?;
        Ok(b)
    }

    pub fn arch(&self) -> Result<ArchConfig> {
        let cfg = ArchConfig {
            width: self.usize("arch.width")?,
            enc_blocks: list("arch.enc_blocks", self.get("arch.enc_blocks"))?,
            mid_blocks: self.usize("arch.mid_blocks")?,
            dec_blocks: list("arch.dec_blocks", self.get("arch.dec_blocks"))?,
            block: self.block()?,
            global_residual: self.bool("arch.global_residual")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr_init: self.f64("train.lr_init")?,
            lr_final: self.f64("train.lr_final")?,
            adam: AdamConfig {
                beta1: self.f64("train.beta1")?,
                beta2: self.f64("train.beta2")?,
                weight_decay: self.f64("train.weight_decay")?,
                ..AdamConfig::default()
            },
            total_iters: self.usize("train.total_iters")?,
            batch_size: self.usize("train.batch_size")?,
            patch_size: self.usize("train.patch_size")?,
            seed: self.u64("train.seed")?,
            grad_clip: optional("train.grad_clip", self.get("train.grad_clip"))?,
            eval_every: optional("train.eval_every", self.get("train.eval_every"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn degradation(&self) -> Result<DegradationSpec> {
        let sigma = self.get("data.sigma");
        let sigma_range = match sigma.split_once(',') {
            Some((lo, hi)) => (parse("data.sigma", lo)?, parse("data.sigma", hi)?),
            None => {
                let s = parse("data.sigma", sigma)?;
                (s, s)
            }
        };
        let spec = DegradationSpec {
            kind: parse::<DegradationKind>("data.kind", self.get("data.kind"))?,
            sigma_range,
            kernel_len: self.usize("data.kernel_len")?,
            kernel_angle: parse::<BlurAngle>("data.angle", self.get("data.angle"))?,
            seed: self.u64("data.seed")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn path(&self, key: &str) -> Option<&Path> {
        let v = self.get(key);
        (!v.is_empty()).then(|| Path::new(v))
    }

    pub fn data_usize(&self, key: &str) -> Result<usize> {
        self.usize(key)
    }

    pub fn eval_max_side(&self) -> Result<Option<usize>> {
        optional("data.eval_max_side", self.get("data.eval_max_side"))
    }

    pub fn macs_size(&self) -> Result<(usize, usize)> {
        Ok((self.usize("macs.height")?, self.usize("macs.width")?))
    }

    pub fn ablation_base(&self) -> Result<ArchConfig> {
        let cfg = ArchConfig {
            width: self.usize("ablate.width")?,
            enc_blocks: list("ablate.enc_blocks", self.get("ablate.enc_blocks"))?,
            mid_blocks: self.usize("ablate.mid_blocks")?,
            dec_blocks: list("ablate.dec_blocks", self.get("ablate.dec_blocks"))?,
            block: BlockConfig::nafnet(),
            global_residual: self.bool("arch.global_residual")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn ablation_tables(&self) -> Result<Vec<Table>> {
        list("ablate.tables", self.get("ablate.tables"))?
            .into_iter()
            .map(|n| match n {
                1 => Ok(Table::BuildUp),
                2 => Ok(Table::Simplify),
                3 => Ok(Table::Depth),
                4 => Ok(Table::Sigma),
                _ => Err(Error::Config(format!("ablate.tables: no table {n}"))),
            })
            .collect()
    }

    pub fn depth_width(&self) -> Result<usize> {
        self.usize("ablate.depth_width")
    }

    pub fn divergence_rule(&self) -> Result<DivergenceRule> {
        let rule = DivergenceRule {
            tail: self.f64("ablate.tail")?,
            margin_db: self.f64("ablate.margin_db")?,
        };
        if !(rule.tail > 0.0 && rule.tail <= 1.0) {
            return Err(Error::Config(format!("ablate.tail must lie in (0, 1], got {}", rule.tail)));
        }
        Ok(rule)
    }

    pub fn gradcheck(&self) -> Result<(u64, f64, f64)> {
        Ok((
            self.u64("gradcheck.seed")?,
            self.f64("gradcheck.step")?,
            self.f64("gradcheck.tolerance")?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.arch().unwrap(), ArchConfig::default());
        assert_eq!(cfg.train().unwrap(), TrainConfig::default());
        assert_eq!(cfg.degradation().unwrap(), DegradationSpec::default());
        assert_eq!(cfg.ablation_base().unwrap(), ArchConfig { width: 10, ..ArchConfig::toy() });
    }

    #[test]
    fn file_then_args() {
        let mut cfg = RunConfig::default();
        cfg.merge_text("# toy\narch.width = 8 # narrow\n\narch.mid_blocks=1\n", "t").unwrap();
        cfg.merge_args(&["--arch.width".into(), "16".into(), "--block.kind=baseline".into()])
            .unwrap();
        let arch = cfg.arch().unwrap();
        assert_eq!((arch.width, arch.mid_blocks), (16, 1));
        assert_eq!(arch.block, BlockConfig::baseline());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        let e = cfg.merge_text("arch.widht = 8\n", "f").unwrap_err();
        assert!(e.to_string().contains("f:1") && e.to_string().contains("arch.widht"));
        assert!(cfg.merge_args(&["--nope".into(), "1".into()]).is_err());
        assert!(cfg.merge_args(&["--arch.width".into()]).is_err());
        assert!(cfg.merge_text("just words\n", "f").is_err());
    }

    #[test]
    fn block_overrides() {
        let mut cfg = RunConfig::default();
        cfg.merge_args(&["--block.sigma".into(), "silu".into()]).unwrap();
        assert_eq!(cfg.block().unwrap().mixer, Mixer::Gate(Activation::Silu));
        cfg.merge_args(&["--block.kind=plain".into(), "--block.norm=true".into(), "--block.sigma=default".into()])
            .unwrap();
        let b = cfg.block().unwrap();
        assert!(b.norm);
        assert_eq!(b.mixer, Mixer::Act(Activation::Relu));
        cfg.merge_args(&["--block.mixer=gate".into(), "--block.attn=sca".into()]).unwrap();
        let b = cfg.block().unwrap();
        assert_eq!((b.mixer, b.attention), (Mixer::Gate(Activation::Identity), Attention::Sca));
    }

    #[test]
    fn render_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.merge_args(&["--data.sigma=15,50".into(), "--train.grad_clip=0.5".into()]).unwrap();
        let mut back = RunConfig::default();
        back.merge_text(&cfg.render(), "echo").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.degradation().unwrap().sigma_range, (15.0, 50.0));
        assert_eq!(back.train().unwrap().grad_clip, Some(0.5));
    }

    #[test]
    fn help_lists_every_key() {
        let help = keys_help();
        for (k, _, _) in KEYS {
            assert!(help.contains(k));
        }
    }
}
