use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nafnet::data::{load_image, save_image, synthetic_image, ColorSpace, Image};
use nafnet::train::read_metric_log;

fn nafnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nafnet")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TOY: &[&str] = &[
    "--arch.width", "4",
    "--arch.enc_blocks", "1,1",
    "--arch.mid_blocks", "1",
    "--arch.dec_blocks", "1,1",
];

fn with_toy<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(TOY.iter().copied()).collect()
}

#[test]
fn help_lists_every_key_with_default() {
    let o = nafnet(&["train", "--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for key in ["arch.width", "block.kind", "train.lr_init", "data.sigma", "ablate.depth_width", "gradcheck.tolerance"] {
        let line = text.lines().find(|l| l.trim_start().starts_with(key)).unwrap_or_else(|| panic!("{key} missing"));
        assert!(line.split_whitespace().count() >= 3, "{line}");
    }
}

#[test]
fn macs_of_default_model() {
    let o = nafnet(&["macs"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let total = stdout(&o).lines().last().unwrap().to_string();
    let g: f64 = total.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((g - 16.0).abs() / 16.0 <= 0.10, "{total}");
    assert!(stdout(&o).contains("enc.0.block.0.conv1"));
}

#[test]
fn exit_codes() {
    assert_eq!(nafnet(&["macs", "--arch.widht", "8"]).status.code(), Some(1));
    assert_eq!(nafnet(&["macs", "--arch.width", "eight"]).status.code(), Some(1));
    assert_eq!(nafnet(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(nafnet(&["macs", "--config", "/definitely/missing.cfg"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("model.nafw");
    fs::write(&bogus, b"not a checkpoint").unwrap();
    let o = nafnet(&["eval", "--checkpoint", bogus.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = nafnet(&with_toy(&["train", "--out", dir.path().join("run").to_str().unwrap(), "--train.lr_init", "1e6", "--train.lr_final", "1e3", "--train.total_iters", "20", "--train.batch_size", "1", "--train.patch_size", "8", "--data.synthetic_count", "2", "--data.synthetic_size", "16", "--data.eval_count", "1", "--data.eval_size", "16"]));
    assert_eq!(o.status.code(), Some(3), "{}{}", stdout(&o), stderr(&o));
    assert!(stderr(&o).contains("iteration"), "{}", stderr(&o));
}

#[test]
fn identity_infer_returns_input() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("init");
    let o = nafnet(&with_toy(&["init", "--out", run.to_str().unwrap()]));
    assert!(o.status.success(), "{}", stderr(&o));
    let input = dir.path().join("in.ppm");
    save_image(&synthetic_image(24, 20, 3), &input).unwrap();
    let output = dir.path().join("out.ppm");
    let ckpt = run.join("model.nafw");
    let o = nafnet(&["infer", "--checkpoint", ckpt.to_str().unwrap(), "--input", input.to_str().unwrap(), "--output", output.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&input).unwrap(), fs::read(&output).unwrap());

    let gray = dir.path().join("in.pgm");
    let img = Image::new(4, 4, ColorSpace::Gray, (0..16).map(|v| v * 15).collect()).unwrap();
    save_image(&img, &gray).unwrap();
    let o = nafnet(&["infer", "--checkpoint", ckpt.to_str().unwrap(), "--input", gray.to_str().unwrap(), "--output", output.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(load_image(&output).unwrap(), img.to_rgb());

    save_image(&synthetic_image(22, 21, 0), &input).unwrap();
    let o = nafnet(&["infer", "--checkpoint", ckpt.to_str().unwrap(), "--input", input.to_str().unwrap(), "--output", output.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("pad by 2 rows and 3 columns"), "{}", stderr(&o));
}

fn train_args(out: &Path) -> Vec<String> {
    let mut v: Vec<String> = ["train", "--out", out.to_str().unwrap()].iter().map(|s| s.to_string()).collect();
    v.extend(TOY.iter().map(|s| s.to_string()));
    for (k, val) in [
        ("train.total_iters", "6"),
        ("train.batch_size", "2"),
        ("train.patch_size", "16"),
        ("train.eval_every", "3"),
        ("data.synthetic_count", "3"),
        ("data.synthetic_size", "24"),
        ("data.eval_count", "2"),
        ("data.eval_size", "16"),
    ] {
        v.push(format!("--{k}"));
        v.push(val.to_string());
    }
    v
}

#[test]
fn echoed_config_reproduces_training() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    let args = train_args(&first);
    let o = Command::new(env!("CARGO_BIN_EXE_nafnet")).args(&args).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let log = read_metric_log(first.join("metrics.csv")).unwrap();
    assert_eq!(log.iter().map(|r| r.iter).collect::<Vec<_>>(), [3, 6]);

    let second = dir.path().join("b");
    let echoed = first.join("config.txt");
    let o = nafnet(&["train", "--out", second.to_str().unwrap(), "--config", echoed.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["model.nafw", "metrics.csv", "config.txt"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
    }

    let ckpt = first.join("model.nafw");
    let o = nafnet(&["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().any(|l| l.starts_with("mean")));
}

#[test]
fn eval_over_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(nafnet(&["gen-data", "--out", data.to_str().unwrap(), "--count", "2", "--size", "32"]).status.success());
    let run = dir.path().join("init");
    assert!(nafnet(&with_toy(&["init", "--out", run.to_str().unwrap()])).status.success());
    let ckpt = run.join("model.nafw");
    let o = nafnet(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data.eval_root", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 4, "{text}");
    let mean: Vec<f64> = text.lines().last().unwrap().split_whitespace().skip(1).map(|v| v.parse().unwrap()).collect();
    assert!((mean[0] - mean[2]).abs() < 1e-3 && (mean[0] - 20.2).abs() < 0.5, "{mean:?}");
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("abl");
    let o = nafnet(&[
        "ablate", "--out", out.to_str().unwrap(),
        "--ablate.tables", "2,3",
        "--ablate.width", "4", "--ablate.enc_blocks", "1", "--ablate.mid_blocks", "1", "--ablate.dec_blocks", "1",
        "--ablate.depth_width", "4",
        "--train.total_iters", "2", "--train.batch_size", "1", "--train.patch_size", "16",
        "--data.synthetic_count", "2", "--data.synthetic_size", "16", "--data.eval_count", "1", "--data.eval_size", "16",
    ]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let rows = nafnet::train::ablation::read_ablation_csv(fs::File::open(out.join("ablation.csv")).unwrap()).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, ["t2:baseline", "t2:+sg", "t2:+sca", "t2:nafnet", "t3:9 blocks", "t3:18 blocks", "t3:36 blocks", "t3:72 blocks"]);
    assert!(rows.iter().all(|r| r.psnr.is_finite() && r.gmacs > 0.0 && r.params > 0));
    assert!(out.join("config.txt").is_file());
}

#[test]
fn gradcheck_passes() {
    let o = nafnet(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(!stdout(&o).contains("FAIL"));
}
