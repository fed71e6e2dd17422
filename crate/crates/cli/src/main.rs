mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nafnet::Error;

use crate::config::{keys_help, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "nafnet",
    version,
    about = "Train, evaluate and inspect activation-free restoration networks",
    after_help = keys_help()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Configuration file with one `key = value` per line.
    #[arg(short, long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Overrides as `--key value` or `--key=value`, applied after the file.
    #[arg(value_name = "OVERRIDES", trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write its checkpoint, metric log and config.
    #[command(after_help = keys_help())]
    Train {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write an untrained (identity) checkpoint and its config.
    #[command(after_help = keys_help())]
    Init {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Report PSNR/SSIM of a checkpoint on the evaluation set.
    #[command(after_help = keys_help())]
    Eval {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Restore one PPM/PGM image.
    #[command(after_help = keys_help())]
    Infer {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        #[arg(long, value_name = "FILE")]
        output: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Print per-layer MACs and the total.
    #[command(after_help = keys_help())]
    Macs {
        #[command(flatten)]
        common: Common,
    },
    /// Run the ablation tables and write ablation.csv.
    #[command(after_help = keys_help())]
    Ablate {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the finite-difference gradient suite.
    #[command(after_help = keys_help())]
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic dataset as <DIR>/clean/*.ppm.
    GenData {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn resolve(common: &Common, sidecar: Option<PathBuf>) -> nafnet::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    match (&common.config, sidecar) {
        (Some(path), _) => cfg.merge_file(path)?,
        (None, Some(path)) if path.is_file() => cfg.merge_file(&path)?,
        _ => {}
    }
    cfg.merge_args(&common.overrides)?;
    Ok(cfg)
}

fn run(cli: Cli) -> nafnet::Result<()> {
    match cli.command {
        Command::Train { out, common } => commands::train(&resolve(&common, None)?, &out),
        Command::Init { out, common } => commands::init(&resolve(&common, None)?, &out),
        Command::Eval { checkpoint, common } => {
            let cfg = resolve(&common, commands::sidecar(&checkpoint))?;
            commands::eval(&cfg, &checkpoint)
        }
        Command::Infer {
            checkpoint,
            input,
            output,
            common,
        } => {
            let cfg = resolve(&common, commands::sidecar(&checkpoint))?;
            commands::infer(&cfg, &checkpoint, &input, &output)
        }
        Command::Macs { common } => commands::macs(&resolve(&common, None)?),
        Command::Ablate { out, common } => commands::ablate(&resolve(&common, None)?, &out),
        Command::Gradcheck { common } => commands::gradcheck(&resolve(&common, None)?),
        Command::GenData { out, count, size, seed } => commands::gen_data(&out, count, size, seed),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::State(_) => 1,
        Error::Io(_) | Error::Csv(_) | Error::Format { .. } | Error::Unsupported(_) => 2,
        Error::Numerics { .. } => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
