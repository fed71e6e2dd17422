use std::fs;
use std::path::{Path, PathBuf};

use nafnet::arch::{build_model, count_macs, count_params, Model};
use nafnet::data::{load_image, save_image, write_synthetic_dataset, Dataset, Image, Pair};
use nafnet::tensor::{load_checkpoint, save_checkpoint};
use nafnet::train::ablation::{ablation_run, macs_spread, variants, write_ablation_csv, Bench, Plan};
use nafnet::train::gradcheck::{run_suite, GradCheckConfig};
use nafnet::train::{evaluate, evaluate_inputs, train_loop, MetricLog};
use nafnet::{Error, Result};

use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "model.nafw";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

/// The config written next to a checkpoint.
pub fn sidecar(checkpoint: &Path) -> Option<PathBuf> {
    checkpoint.parent().map(|d| d.join(CONFIG_FILE))
}

fn prepare_out(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.render())?;
    Ok(())
}

fn training_set(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.path("data.root") {
        Some(root) => Dataset::load(root),
        None => {
            let size = cfg.data_usize("data.synthetic_size")?;
            Ok(Dataset::synthetic(cfg.data_usize("data.synthetic_count")?, size, size, cfg.train()?.seed))
        }
    }
}

fn eval_set(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.path("data.eval_root") {
        Some(root) => Dataset::load(root),
        None => {
            let size = cfg.data_usize("data.eval_size")?;
            Ok(Dataset::synthetic(cfg.data_usize("data.eval_count")?, size, size, cfg.train()?.seed + 1_000_003))
        }
    }
}

fn eval_pairs(cfg: &RunConfig, divisor: usize) -> Result<(Dataset, Vec<Pair>)> {
    let set = eval_set(cfg)?;
    let pairs = set.eval_pairs(&cfg.degradation()?, divisor, cfg.eval_max_side()?)?;
    Ok((set, pairs))
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Model<f32>> {
    let arch = cfg.arch()?;
    let mut model = build_model::<f32>(&arch, 0)?;
    let store = load_checkpoint(checkpoint)?;
    model.params.load_values(&store)?;
    Ok(model)
}

pub fn init(cfg: &RunConfig, out: &Path) -> Result<()> {
    let arch = cfg.arch()?;
    let model = build_model::<f32>(&arch, cfg.train()?.seed)?;
    prepare_out(cfg, out)?;
    save_checkpoint(&model.params, out.join(CHECKPOINT_FILE))?;
    println!("wrote {} ({} parameters)", out.join(CHECKPOINT_FILE).display(), model.params.numel());
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let arch = cfg.arch()?;
    let tcfg = cfg.train()?;
    let spec = cfg.degradation()?;
    let data = training_set(cfg)?;
    let (_, eval) = eval_pairs(cfg, arch.divisor())?;
    prepare_out(cfg, out)?;
    let mut model = build_model::<f32>(&arch, tcfg.seed)?;
    let (noisy_psnr, noisy_ssim) = evaluate_inputs(&eval)?;
    println!("{arch}");
    println!("degraded inputs: psnr {noisy_psnr:.3} dB  ssim {noisy_ssim:.4}");
    let mut log = MetricLog::create(out.join(METRICS_FILE))?;
    let result = train_loop(&mut model, &data, &spec, &eval, &tcfg, |r| {
        println!(
            "iter {:>6}  lr {:.3e}  loss {:>9.4}  psnr {:.3} dB  ssim {:.4}",
            r.iter, r.lr, r.loss, r.psnr, r.ssim
        );
        log.append(r)
    });
    match result {
        Ok(_) => {
            save_checkpoint(&model.params, out.join(CHECKPOINT_FILE))?;
            println!("wrote {}", out.join(CHECKPOINT_FILE).display());
            Ok(())
        }
        Err(f) => Err(f.error),
    }
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let model = load_model(cfg, checkpoint)?;
    let (set, pairs) = eval_pairs(cfg, model.cfg.divisor())?;
    println!("{:<24} {:>10} {:>8} {:>10} {:>8}", "image", "psnr", "ssim", "in psnr", "in ssim");
    let (mut sp, mut ss, mut ip, mut is) = (0.0, 0.0, 0.0, 0.0);
    for (name, pair) in set.names.iter().zip(&pairs) {
        let one = std::slice::from_ref(pair);
        let (p, s) = evaluate(&model, one)?;
        let (p0, s0) = evaluate_inputs(one)?;
        println!("{name:<24} {p:>10.3} {s:>8.4} {p0:>10.3} {s0:>8.4}");
        sp += p;
        ss += s;
        ip += p0;
        is += s0;
    }
    let n = pairs.len().max(1) as f64;
    println!("{:<24} {:>10.3} {:>8.4} {:>10.3} {:>8.4}", "mean", sp / n, ss / n, ip / n, is / n);
    Ok(())
}

pub fn infer(cfg: &RunConfig, checkpoint: &Path, input: &Path, output: &Path) -> Result<()> {
    let model = load_model(cfg, checkpoint)?;
    let img = load_image(input)?.to_rgb();
    model.cfg.check_input(img.height, img.width)?;
    let restored = model.infer(&img.to_tensor::<f32>())?;
    save_image(&Image::from_tensor(&restored)?, output)?;
    Ok(())
}

pub fn macs(cfg: &RunConfig) -> Result<()> {
    let arch = cfg.arch()?;
    let (h, w) = cfg.macs_size()?;
    let report = count_macs(&arch, h, w)?;
    println!("{arch} at {h}x{w}");
    println!("{:<34} {:<36} {:>14}", "layer", "shape", "MACs");
    for l in &report.layers {
        println!("{:<34} {:<36} {:>14}", l.name, l.detail, l.macs);
    }
    println!("total {:.4} GMACs, {} parameters", report.gmacs(), count_params(&arch)?);
    Ok(())
}

pub fn ablate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let plan = Plan {
        base: cfg.ablation_base()?,
        depth_width: cfg.depth_width()?,
        tables: cfg.ablation_tables()?,
        lr: cfg.train()?.lr_init,
    };
    let rows = variants(&plan)?;
    let mut spreads: Vec<_> = macs_spread(&rows)?.into_iter().collect();
    spreads.sort_by_key(|s| s.0);
    for (table, spread) in spreads {
        println!("{table}: MACs spread {:.2}%", spread * 100.0);
    }
    let tcfg = cfg.train()?;
    let spec = cfg.degradation()?;
    let data = training_set(cfg)?;
    let divisor = rows.iter().map(|v| v.arch.divisor()).max().unwrap_or(1);
    let (_, eval) = eval_pairs(cfg, divisor)?;
    prepare_out(cfg, out)?;
    let bench = Bench {
        train: &tcfg,
        data: &data,
        degradation: &spec,
        eval: &eval,
        model_seed: tcfg.seed,
        rule: cfg.divergence_rule()?,
    };
    let mut failures = 0;
    let results = ablation_run(&rows, &bench, |r, err| {
        println!(
            "{:<20} psnr {:>8.3}  ssim {:.4}  {:.4} GMACs  {:>9} params  diverged {}",
            r.variant, r.psnr, r.ssim, r.gmacs, r.params, r.diverged
        );
        if let Some(e) = err {
            failures += 1;
            eprintln!("  {} failed: {e}", r.variant);
        }
    });
    write_ablation_csv(&results, fs::File::create(out.join(ABLATION_FILE))?)?;
    println!("wrote {}", out.join(ABLATION_FILE).display());
    if failures > 0 {
        return Err(Error::Config(format!("{failures} variant(s) failed")));
    }
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig) -> Result<()> {
    let (seed, step, tolerance) = cfg.gradcheck()?;
    let gc = GradCheckConfig {
        step,
        tolerance,
        ..GradCheckConfig::default()
    };
    let results = run_suite(seed, &gc, |r| println!("{r}"))?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    println!("{} of {} checks passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numerics {
            context: "gradient check".into(),
            detail: format!("failed: {}", failed.join(", ")),
        })
    }
}

pub fn gen_data(out: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    let paths = write_synthetic_dataset(out, count, size, size, seed)?;
    println!("wrote {} images under {}", paths.len(), out.join("clean").display());
    Ok(())
}
