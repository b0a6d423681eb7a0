use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pip_fcil::commands::{
    cmd_check_aggregation, cmd_commcost, cmd_gradcheck, cmd_report, cmd_run, exit_code, OUTPUT_DIR_ENV,
};

/// Federated class-incremental prompt learning simulator.
#[derive(Parser)]
#[command(name = "pipsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config for every seed and write reports.
    Run {
        config: PathBuf,
        /// Output directory (overrides the config and PIP_OUTPUT_DIR).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the weighted Gaussian merge and FedAvg degeneracy.
    CheckAggregation {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        /// Largest feature dimension drawn.
        #[arg(long, default_value_t = 32)]
        dims: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of the local-loss gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
    },
    /// Analytic versus measured upload sizes.
    Commcost { config: PathBuf },
    /// Recompute metrics from a saved matrix_seed*.json.
    Report {
        matrix: PathBuf,
        #[arg(long)]
        reference_avg: Option<f64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    let result = match cli.command {
        Command::Run { config, out } => {
            let dir = out.or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from));
            cmd_run(&config, dir, &mut stdout)
        }
        Command::CheckAggregation { trials, dims, seed } => cmd_check_aggregation(trials, dims, seed, &mut stdout),
        Command::Gradcheck { seed, lambda } => cmd_gradcheck(seed, lambda, &mut stdout),
        Command::Commcost { config } => cmd_commcost(&config, &mut stdout),
        Command::Report { matrix, reference_avg } => cmd_report(&matrix, reference_avg, &mut stdout),
    };
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    ExitCode::from(exit_code(&result) as u8)
}
