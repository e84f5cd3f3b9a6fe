use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use optomo_harness::commands::{
    cmd_forward, cmd_linearized_compare, cmd_make_data, cmd_posterior_compare, cmd_rates, RunOptions,
};
use optomo_harness::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "optomo", version, about = "Transport and diffusion tomography experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate both forward maps on the configured medium.
    Forward(Common),
    /// Asymptotic residual and forward-gap rates.
    Rates(Common),
    /// Sampled posterior comparison across epsilon.
    PosteriorCompare(Common),
    /// Linearized kernels, maps and Gaussian posteriors.
    LinearizedCompare(Common),
    /// Synthesize a data vector.
    MakeData(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Also rerun at doubled resolution and write refine.json.
    #[arg(long)]
    refine: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (run, common): (fn(&[u8], &RunOptions) -> optomo_harness::Result<_>, Common) = match cli.command {
        Command::Forward(c) => (cmd_forward, c),
        Command::Rates(c) => (cmd_rates, c),
        Command::PosteriorCompare(c) => (cmd_posterior_compare, c),
        Command::LinearizedCompare(c) => (cmd_linearized_compare, c),
        Command::MakeData(c) => (cmd_make_data, c),
    };
    let result = ExperimentConfig::load(&common.config).and_then(|(_, bytes)| {
        let opts = RunOptions {
            out: common.out,
            seed: common.seed,
            threads: common.threads,
            refine: common.refine,
        };
        run(&bytes, &opts)
    });
    match result {
        Ok(report) => {
            for s in &report.studies {
                println!("{:<20} slope {:>7.3}  r2 {:.4}", s.metric, s.slope, s.r2);
            }
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
