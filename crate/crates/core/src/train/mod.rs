//! Optimization, metrics, gradient checking and the ablation harness.

pub mod ablation;
pub mod gradcheck;
mod metrics;
mod optim;

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use metrics::{mse, psnr, psnr_capped, psnr_loss, ssim, PSNR_CAP, PSNR_LOSS_EPS};
pub use optim::{clip_grad_norm, cosine_lr, Adam, AdamConfig};

use crate::arch::Model;
use crate::data::{Dataset, DegradationSpec, Pair};
use crate::error::{Error, Result};
use crate::tensor::Graph;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub adam: AdamConfig,
    pub total_iters: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    /// Evaluation period; `None` means every `max(total_iters / 20, 1)`.
    pub eval_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 1e-3,
            lr_final: 1e-6,
            adam: AdamConfig::default(),
            total_iters: 2000,
            batch_size: 8,
            patch_size: 48,
            seed: 0,
            grad_clip: None,
            eval_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_final > 0.0 && self.lr_init >= self.lr_final && self.lr_init.is_finite()) {
            return Err(Error::config(format!(
                "learning rates need lr_init >= lr_final > 0, got {} and {}",
                self.lr_init, self.lr_final
            )));
        }
        if self.total_iters == 0 || self.batch_size == 0 || self.patch_size == 0 {
            return Err(Error::config("total_iters, batch_size and patch_size must be positive"));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 || a.weight_decay < 0.0 {
            return Err(Error::config(format!("invalid Adam settings {a:?}")));
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 || !c.is_finite() {
                return Err(Error::config(format!("grad_clip must be positive, got {c}")));
            }
        }
        if self.eval_every == Some(0) {
            return Err(Error::config("eval_every must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, iter: usize) -> f64 {
        cosine_lr(iter, self.total_iters, self.lr_init, self.lr_final)
    }

    pub fn eval_period(&self) -> usize {
        self.eval_every.unwrap_or((self.total_iters / 20).max(1))
    }
}

/// One row of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub iter: usize,
    pub lr: f64,
    /// Training loss of this iteration's batch.
    pub loss: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Append-only CSV with header `iter,lr,loss,psnr,ssim`.
pub struct MetricLog<W: Write> {
    writer: csv::Writer<W>,
}

impl MetricLog<File> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Ok(MetricLog {
            writer: csv::Writer::from_path(path)?,
        })
    }
}

impl<W: Write> MetricLog<W> {
    pub fn new(out: W) -> Self {
        MetricLog {
            writer: csv::Writer::from_writer(out),
        }
    }

    pub fn append(&mut self, row: &MetricReport) -> Result<()> {
        self.writer.serialize(row)?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.writer
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }
}

pub fn read_metric_log(path: impl AsRef<Path>) -> Result<Vec<MetricReport>> {
    parse_metric_log(File::open(path)?)
}

pub fn parse_metric_log(input: impl std::io::Read) -> Result<Vec<MetricReport>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Mean capped PSNR and SSIM of the model over `pairs`.
pub fn evaluate(model: &Model<f32>, pairs: &[Pair]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::config("no evaluation pairs"));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for pair in pairs {
        let out = model.infer(&pair.degraded)?.map(|v| v.clamp(0.0, 1.0));
        p += psnr_capped(&out, &pair.clean)?;
        s += ssim(&out, &pair.clean)?;
    }
    let n = pairs.len() as f64;
    Ok((p / n, s / n))
}

/// Mean PSNR and SSIM of the degraded inputs themselves.
pub fn evaluate_inputs(pairs: &[Pair]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::config("no evaluation pairs"));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for pair in pairs {
        p += psnr_capped(&pair.degraded, &pair.clean)?;
        s += ssim(&pair.degraded, &pair.clean)?;
    }
    let n = pairs.len() as f64;
    Ok((p / n, s / n))
}

/// What a training run produced.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSummary {
    /// Training loss of every completed iteration.
    pub losses: Vec<f64>,
    pub reports: Vec<MetricReport>,
}

impl TrainSummary {
    pub fn last_report(&self) -> Option<&MetricReport> {
        self.reports.last()
    }
}

/// Failure of a run after `summary.losses.len()` completed iterations.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub summary: TrainSummary,
}

fn at_iteration(iter: usize, e: Error) -> Error {
    match e {
        Error::Numerics { context, detail } => Error::Numerics {
            context: format!("iteration {iter}: {context}"),
            detail,
        },
        other => other,
    }
}

/// One optimization step on a batch; returns the loss.
pub fn train_step(model: &mut Model<f32>, adam: &mut Adam, batch: &Pair, lr: f64, grad_clip: Option<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.input(batch.degraded.clone())?;
    let y = g.input(batch.clean.clone())?;
    let out = model.forward(&mut g, x)?;
    let loss = psnr_loss(&mut g, out, y)?;
    let value = g.value(loss).data()[0] as f64;
    let grads = g.backward(loss)?;
    model.params.zero_grad();
    grads.accumulate_into(&mut model.params);
    if let Some(c) = grad_clip {
        clip_grad_norm(&mut model.params, c);
    }
    adam.step(&mut model.params, lr)?;
    Ok(value)
}

/// Runs `cfg.total_iters` steps of sample, forward, PSNR loss, backward and
/// Adam under the cosine schedule. Evaluates on `eval` every
/// [`TrainConfig::eval_period`] iterations and after the last one, passing
/// each report to `on_report`.
pub fn train_loop(
    model: &mut Model<f32>,
    data: &Dataset,
    degradation: &DegradationSpec,
    eval: &[Pair],
    cfg: &TrainConfig,
    mut on_report: impl FnMut(&MetricReport) -> Result<()>,
) -> Result<TrainSummary, TrainFailure> {
    let mut summary = TrainSummary::default();
    macro_rules! bail {
        ($iter:expr, $e:expr) => {
            return Err(TrainFailure {
                error: at_iteration($iter, $e),
                summary,
            })
        };
    }
    if let Err(e) = cfg.validate().and_then(|_| degradation.validate()) {
        bail!(0, e);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam);
    let period = cfg.eval_period();
    for iter in 0..cfg.total_iters {
        let lr = cfg.lr_at(iter);
        let batch = match data.sample_batch(cfg.batch_size, cfg.patch_size, degradation, &mut rng) {
            Ok(b) => b,
            Err(e) => bail!(iter, e),
        };
        let loss = match train_step(model, &mut adam, &batch, lr, cfg.grad_clip) {
            Ok(l) => l,
            Err(e) => bail!(iter, e),
        };
        summary.losses.push(loss);
        let done = iter + 1;
        if done % period == 0 || done == cfg.total_iters {
            let (psnr, ssim) = match evaluate(model, eval) {
                Ok(m) => m,
                Err(e) => bail!(iter, e),
            };
            let report = MetricReport {
                iter: done,
                lr,
                loss,
                psnr,
                ssim,
            };
            if let Err(e) = on_report(&report) {
                bail!(iter, e);
            }
            summary.reports.push(report);
        }
    }
    Ok(summary)
}
