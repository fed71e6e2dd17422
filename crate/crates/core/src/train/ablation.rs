//! Desk-scale reruns of the build-up, simplification, σ-variant and
//! block-count tables.
//!
//! Every row is trained with the same [`TrainConfig`] (except where the row
//! itself fixes the learning rate) and reported as one CSV line
//! `variant,psnr,ssim,gmacs,params,diverged`. Widths are chosen per row so
//! that its 256×256 MACs sit as close as possible to the reference budget of
//! its table.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{evaluate, train_loop, TrainConfig, TrainSummary};
use crate::arch::{build_model, count_macs, count_params, ArchConfig};
use crate::blocks::{Attention, BlockConfig, Mixer};
use crate::data::{Dataset, DegradationSpec, Pair};
use crate::error::{Error, Result};
use crate::tensor::Activation;

/// Spatial size at which budgets are compared.
pub const BUDGET_SIZE: usize = 256;

/// Allowed relative MACs deviation inside one table.
pub const MACS_BAND: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Table {
    /// PlainNet → +LN → +GELU → +CA.
    BuildUp,
    /// GELU → SimpleGate, CA → SCA.
    Simplify,
    /// Number of blocks at a fixed budget.
    Depth,
    /// σ inside the gate.
    Sigma,
}

impl Table {
    pub const ALL: [Table; 4] = [Table::BuildUp, Table::Simplify, Table::Depth, Table::Sigma];

    pub fn tag(self) -> &'static str {
        match self {
            Table::BuildUp => "t1",
            Table::Simplify => "t2",
            Table::Depth => "t3",
            Table::Sigma => "t4",
        }
    }
}

impl fmt::Display for Table {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub table: Table,
    pub arch: ArchConfig,
    pub lr_init: f64,
}

/// Which tables to build and at what scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    /// Layout and width of the budget-defining NAFNet for tables 1, 2 and 4.
    pub base: ArchConfig,
    /// Width of the 36-block reference of the block-count sweep.
    pub depth_width: usize,
    pub tables: Vec<Table>,
    /// Learning rate of every row that does not fix its own.
    pub lr: f64,
}

impl Plan {
    pub fn new(base: ArchConfig, lr: f64) -> Self {
        Plan {
            base,
            depth_width: 32,
            tables: Table::ALL.to_vec(),
            lr,
        }
    }
}

/// Block layouts of the block-count sweep.
pub fn depth_layout(blocks: usize) -> Option<(Vec<usize>, usize, Vec<usize>)> {
    match blocks {
        9 => Some((vec![1, 1, 1, 1], 1, vec![1, 1, 1, 1])),
        18 => Some((vec![1, 1, 2, 4], 6, vec![1, 1, 1, 1])),
        36 => Some((vec![2, 2, 4, 8], 12, vec![2, 2, 2, 2])),
        72 => Some((vec![4, 4, 8, 16], 24, vec![4, 4, 4, 4])),
        _ => None,
    }
}

fn macs_at_budget(cfg: &ArchConfig) -> Result<u64> {
    Ok(count_macs(cfg, BUDGET_SIZE, BUDGET_SIZE)?.total())
}

/// The valid width whose MACs are closest to `budget`.
pub fn match_width(cfg: &ArchConfig, budget: u64) -> Result<ArchConfig> {
    let mut best: Option<(f64, ArchConfig)> = None;
    let mut candidate = cfg.clone();
    for width in 1..=4096 {
        candidate.width = width;
        if candidate.validate().is_err() {
            continue;
        }
        let macs = macs_at_budget(&candidate)?;
        let gap = (macs as f64 - budget as f64).abs();
        if best.as_ref().map_or(true, |(b, _)| gap < *b) {
            best = Some((gap, candidate.clone()));
        }
        if macs > budget {
            break;
        }
    }
    best.map(|(_, c)| c)
        .ok_or_else(|| Error::config(format!("no valid width for {cfg}")))
}

fn with_block(base: &ArchConfig, block: BlockConfig) -> ArchConfig {
    ArchConfig { block, ..base.clone() }
}

/// The rows of every requested table, widths already matched.
pub fn variants(plan: &Plan) -> Result<Vec<Variant>> {
    let base = ArchConfig {
        block: BlockConfig::nafnet(),
        ..plan.base.clone()
    };
    let budget = macs_at_budget(&base)?;
    let mut rows = Vec::new();
    let mut push = |table: Table, name: &str, arch: ArchConfig, lr: f64, budget: u64| -> Result<()> {
        rows.push(Variant {
            name: format!("{}:{name}", table.tag()),
            table,
            arch: match_width(&arch, budget)?,
            lr_init: lr,
        });
        Ok(())
    };
    let lr = plan.lr;

    for &table in &plan.tables {
        match table {
            Table::BuildUp => {
                let plain = BlockConfig::plain();
                let ln = BlockConfig { norm: true, ..plain };
                let gelu = BlockConfig {
                    mixer: Mixer::Act(Activation::GeluExact),
                    ..ln
                };
                push(table, "plain lr=1e-4", with_block(&base, plain), lr / 10.0, budget)?;
                push(table, "plain", with_block(&base, plain), lr, budget)?;
                push(table, "+ln", with_block(&base, ln), lr, budget)?;
                push(table, "+ln+gelu", with_block(&base, gelu), lr, budget)?;
                push(table, "baseline", with_block(&base, BlockConfig::baseline()), lr, budget)?;
            }
            Table::Simplify => {
                let b = BlockConfig::baseline();
                let sg = BlockConfig {
                    mixer: Mixer::Gate(Activation::Identity),
                    ..b
                };
                let sca = BlockConfig {
                    attention: Attention::Sca,
                    ..b
                };
                push(table, "baseline", with_block(&base, b), lr, budget)?;
                push(table, "+sg", with_block(&base, sg), lr, budget)?;
                push(table, "+sca", with_block(&base, sca), lr, budget)?;
                push(table, "nafnet", with_block(&base, BlockConfig::nafnet()), lr, budget)?;
            }
            Table::Sigma => {
                for sigma in [
                    Activation::Identity,
                    Activation::Relu,
                    Activation::GeluExact,
                    Activation::Sigmoid,
                    Activation::Silu,
                ] {
                    let block = BlockConfig {
                        mixer: Mixer::Gate(sigma),
                        ..BlockConfig::nafnet()
                    };
                    push(table, &format!("sigma={sigma}"), with_block(&base, block), lr, budget)?;
                }
            }
            Table::Depth => {
                let layout = |n: usize, width: usize| {
                    let (enc, mid, dec) = depth_layout(n).expect("known depth");
                    ArchConfig {
                        width,
                        enc_blocks: enc,
                        mid_blocks: mid,
                        dec_blocks: dec,
                        block: BlockConfig::nafnet(),
                        global_residual: base.global_residual,
                    }
                };
                let depth_budget = macs_at_budget(&layout(36, plan.depth_width))?;
                for n in [9, 18, 36, 72] {
                    push(table, &format!("{n} blocks"), layout(n, plan.depth_width), lr, depth_budget)?;
                }
            }
        }
    }
    Ok(rows)
}

/// One line of the ablation CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub psnr: f64,
    pub ssim: f64,
    pub gmacs: f64,
    pub params: usize,
    pub diverged: bool,
}

/// When a finished run counts as unstable.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DivergenceRule {
    /// Fraction of the run, at its end, whose mean loss is compared.
    pub tail: f64,
    /// Allowed excess of that mean over the loss of the first iteration, in dB.
    pub margin_db: f64,
}

impl Default for DivergenceRule {
    fn default() -> Self {
        DivergenceRule {
            tail: 0.1,
            margin_db: 0.0,
        }
    }
}

impl DivergenceRule {
    /// True when the run ended worse than where it started: the mean loss
    /// of the final `tail` of iterations exceeds the first loss (the loss of
    /// the identity map) by more than `margin_db`.
    pub fn diverged(&self, losses: &[f64]) -> bool {
        let Some(&first) = losses.first() else {
            return false;
        };
        if losses.iter().any(|l| !l.is_finite()) {
            return true;
        }
        let k = ((losses.len() as f64 * self.tail).ceil() as usize).clamp(1, losses.len());
        let tail = &losses[losses.len() - k..];
        let mean = tail.iter().sum::<f64>() / k as f64;
        mean > first + self.margin_db
    }
}

/// Shared training inputs of every row.
pub struct Bench<'a> {
    pub train: &'a TrainConfig,
    pub data: &'a Dataset,
    pub degradation: &'a DegradationSpec,
    pub eval: &'a [Pair],
    pub model_seed: u64,
    pub rule: DivergenceRule,
}

fn run_one(v: &Variant, bench: &Bench<'_>) -> Result<AblationRow> {
    let gmacs = macs_at_budget(&v.arch)? as f64 / 1e9;
    let params = count_params(&v.arch)?;
    let cfg = TrainConfig {
        lr_init: v.lr_init,
        lr_final: bench.train.lr_final.min(v.lr_init),
        ..bench.train.clone()
    };
    let mut model = build_model::<f32>(&v.arch, bench.model_seed)?;
    let row = |psnr, ssim, diverged| AblationRow {
        variant: v.name.clone(),
        psnr,
        ssim,
        gmacs,
        params,
        diverged,
    };
    match train_loop(&mut model, bench.data, bench.degradation, bench.eval, &cfg, |_| Ok(())) {
        Ok(TrainSummary { losses, .. }) => {
            let (psnr, ssim) = evaluate(&model, bench.eval).unwrap_or((f64::NAN, f64::NAN));
            Ok(row(psnr, ssim, bench.rule.diverged(&losses)))
        }
        Err(f) => match f.error {
            Error::Numerics { .. } => Ok(row(f64::NAN, f64::NAN, true)),
            other => Err(other),
        },
    }
}

/// Trains every variant, reusing results of identical (architecture,
/// learning rate) pairs. Every variant yields a row; one that fails for a
/// reason other than numerics gets NaN metrics and its error is passed to
/// `on_row`.
pub fn ablation_run(
    variants: &[Variant],
    bench: &Bench<'_>,
    mut on_row: impl FnMut(&AblationRow, Option<&Error>),
) -> Vec<AblationRow> {
    let mut cache: HashMap<(ArchConfig, u64), AblationRow> = HashMap::new();
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let key = (v.arch.clone(), v.lr_init.to_bits());
        let (row, error) = match cache.get(&key) {
            Some(r) => (
                AblationRow {
                    variant: v.name.clone(),
                    ..r.clone()
                },
                None,
            ),
            None => match run_one(v, bench) {
                Ok(r) => {
                    cache.insert(key, r.clone());
                    (r, None)
                }
                Err(e) => (
                    AblationRow {
                        variant: v.name.clone(),
                        psnr: f64::NAN,
                        ssim: f64::NAN,
                        gmacs: macs_at_budget(&v.arch).map_or(f64::NAN, |m| m as f64 / 1e9),
                        params: count_params(&v.arch).unwrap_or(0),
                        diverged: false,
                    },
                    Some(e),
                ),
            },
        };
        on_row(&row, error.as_ref());
        rows.push(row);
    }
    rows
}

/// Largest relative MACs gap between rows of the same table.
pub fn macs_spread(rows: &[Variant]) -> Result<HashMap<Table, f64>> {
    let mut by_table: HashMap<Table, (u64, u64)> = HashMap::new();
    for v in rows {
        let m = macs_at_budget(&v.arch)?;
        let e = by_table.entry(v.table).or_insert((m, m));
        e.0 = e.0.min(m);
        e.1 = e.1.max(m);
    }
    Ok(by_table
        .into_iter()
        .map(|(t, (lo, hi))| (t, (hi - lo) as f64 / lo as f64))
        .collect())
}

pub fn write_ablation_csv(rows: &[AblationRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ablation_csv(input: impl Read) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_table_has_its_rows() {
        let v = variants(&Plan::new(ArchConfig::toy(), 1e-3)).unwrap();
        let names: Vec<&str> = v.iter().map(|v| v.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "t1:plain lr=1e-4",
                "t1:plain",
                "t1:+ln",
                "t1:+ln+gelu",
                "t1:baseline",
                "t2:baseline",
                "t2:+sg",
                "t2:+sca",
                "t2:nafnet",
                "t3:9 blocks",
                "t3:18 blocks",
                "t3:36 blocks",
                "t3:72 blocks",
                "t4:sigma=identity",
                "t4:sigma=relu",
                "t4:sigma=gelu",
                "t4:sigma=sigmoid",
                "t4:sigma=silu",
            ]
        );
        assert_eq!(v[0].lr_init, 1e-4);
        assert_eq!(v[3].lr_init, 1e-3);
        let depth: Vec<usize> = v.iter().filter(|v| v.table == Table::Depth).map(|v| v.arch.total_blocks()).collect();
        assert_eq!(depth, [9, 18, 36, 72]);
    }

    #[test]
    fn depth_sweep_holds_budget() {
        let v = variants(&Plan {
            tables: vec![Table::Depth],
            ..Plan::new(ArchConfig::default(), 1e-3)
        })
        .unwrap();
        let spread = macs_spread(&v).unwrap();
        assert!(spread[&Table::Depth] <= MACS_BAND, "{spread:?}");
        let widths: Vec<usize> = v.iter().map(|v| v.arch.width).collect();
        assert!(widths.windows(2).all(|w| w[0] > w[1]), "{widths:?}");
        assert_eq!(widths[2], 32);
    }

    #[test]
    fn matched_width_is_closest() {
        let base = ArchConfig::default();
        let budget = macs_at_budget(&base).unwrap();
        assert_eq!(match_width(&base, budget).unwrap().width, 32);
        let baseline = match_width(&with_block(&base, BlockConfig::baseline()), budget).unwrap();
        assert!(baseline.width < 32);
    }

    #[test]
    fn divergence_rule() {
        let rule = DivergenceRule::default();
        assert!(!rule.diverged(&[-20.0, -21.0, -22.0, -23.0]));
        assert!(rule.diverged(&[-20.0, -21.0, -15.0, -10.0]));
        assert!(rule.diverged(&[-20.0, f64::NAN]));
        assert!(!rule.diverged(&[]));
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            AblationRow {
                variant: "t1:plain lr=1e-4".into(),
                psnr: 24.123456789012345,
                ssim: 0.7000000000000001,
                gmacs: 16.04503552,
                params: 29159715,
                diverged: false,
            },
            AblationRow {
                variant: "t1:plain".into(),
                psnr: f64::NAN,
                ssim: f64::NAN,
                gmacs: 1e-3,
                params: 1,
                diverged: true,
            },
        ];
        let mut buf = Vec::new();
        write_ablation_csv(&rows, &mut buf).unwrap();
        assert!(buf.starts_with(b"variant,psnr,ssim,gmacs,params,diverged\n"));
        let back = read_ablation_csv(&buf[..]).unwrap();
        assert_eq!(back[0], rows[0]);
        assert!(back[1].psnr.is_nan() && back[1].diverged);
    }
}
