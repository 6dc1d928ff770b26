use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mmtr_cli::commands::{self, EvalArgs, FitArgs, PredictArgs, ReplicateArgs, SimulateArgs, TuneArgs};
use mmtr_cli::{CliError, CliResult};

/// Mixed model trace regression.
///
/// Logging is controlled by MMTR_LOG (error, info or debug).
#[derive(Debug, Parser)]
#[command(name = "mmtr", version)]
struct Cli {
    /// Worker threads for tuning grids and replications (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a dataset and its truth model.
    Simulate(SimulateArgs),
    /// Fit one (λ_B, λ_L) pair.
    Fit(FitArgs),
    /// Fit a λ grid and keep the best model.
    Tune(TuneArgs),
    /// Write per-observation predictions.
    Predict(PredictArgs),
    /// Prediction metrics and, given a truth file, parameter errors.
    Eval(EvalArgs),
    /// Run a seeded simulation study.
    Replicate(ReplicateArgs),
}

fn run(cli: Cli) -> CliResult<String> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| CliError::Other(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Fit(a) => commands::fit(a),
        Command::Tune(a) => commands::tune_cmd(a),
        Command::Predict(a) => commands::predict(a),
        Command::Eval(a) => commands::eval(a),
        Command::Replicate(a) => commands::replicate(a),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MMTR_LOG", "error")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
