use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mdpad::cli::{run, Command, Overrides, RunConfig};
use mdpad::pipeline::Ablation;

/// Cross-domain face PAD: synthetic data, two-stage training, evaluation.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the configured synthetic domains as dataset directories.
    Synth(Common),
    /// Stage 1: per-domain PAD and ID encoders.
    TrainDr(Common),
    /// Stage 2 on stage-1 checkpoints, then the final classifier.
    TrainMd(Common),
    /// Report HTER/AUC on the test domain.
    Eval(Common),
    /// Train and evaluate every spec of the configured protocol.
    ProtocolRun(Common),
    /// Dump PAD features of every domain as CSV.
    ExportFeatures(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    no_dr: bool,
    #[arg(long)]
    no_md: bool,
    #[arg(long)]
    no_ce: bool,
    #[arg(long)]
    no_rec: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MDPAD_LOG", "warn")).init();
    let (cmd, args) = match Cli::parse().command {
        Cmd::Synth(a) => (Command::Synth, a),
        Cmd::TrainDr(a) => (Command::TrainDr, a),
        Cmd::TrainMd(a) => (Command::TrainMd, a),
        Cmd::Eval(a) => (Command::Eval, a),
        Cmd::ProtocolRun(a) => (Command::ProtocolRun, a),
        Cmd::ExportFeatures(a) => (Command::ExportFeatures, a),
    };
    let result = RunConfig::load(&args.config).and_then(|mut cfg| {
        cfg.apply(&Overrides {
            seed: args.seed,
            output_dir: args.output,
            ablation: Ablation {
                no_dr: args.no_dr,
                no_md: args.no_md,
                no_ce: args.no_ce,
                no_rec: args.no_rec,
            },
        });
        run(cmd, &cfg)
    });
    match result {
        Ok(m) => {
            println!("{}: {} outputs under {}", cmd, m.outputs.len(), m.config.output_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
