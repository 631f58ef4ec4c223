use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

#[derive(Parser, Debug)]
#[command(name = "rainsep", version, about = "Single-image rain removal by layer decomposition")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Compute device; only `cpu` is built in and other values fall back to it.
    #[arg(long, global = true, env = config::DEVICE_ENV)]
    device: Option<String>,
    /// Output directory (output file for `eval` and `bench` reports).
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set train.batch=4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic triplet dataset.
    Synth(commands::SynthArgs),
    /// Pretrain on paired synthetic triplets.
    Train(commands::TrainArgs),
    /// Adversarially fine-tune a pretrained checkpoint on real images.
    Finetune(commands::FinetuneArgs),
    /// Remove rain from an image or every PNG in a directory.
    Derain(commands::DerainArgs),
    /// Score derained results against ground truth with PSNR and SSIM.
    Eval(commands::EvalArgs),
    /// Time inference at fixed image sizes.
    Bench(commands::BenchArgs),
}

/// Exit status for failures: 2 when training or the model aborted, 1 for
/// anything the user can fix.
fn exit_code(err: &anyhow::Error) -> u8 {
    use rainsep_core::Error as E;
    match err.downcast_ref::<E>() {
        Some(E::NonFiniteLoss { .. } | E::StageInvariant(_) | E::ShapeInconsistency(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&cli.common, a),
        Command::Train(a) => commands::train(&cli.common, a),
        Command::Finetune(a) => commands::finetune(&cli.common, a),
        Command::Derain(a) => commands::derain(&cli.common, a),
        Command::Eval(a) => commands::eval(&cli.common, a),
        Command::Bench(a) => commands::bench(&cli.common, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
