//! `gfagru` — heavy-tail factor-model pipeline CLI.
//!
//! Commands compose through files: `synth`/`ingest` produce a price table,
//! `train` fits the ensemble, `forecast` emits per-date factor models,
//! `simulate` draws scenario matrices, `optimize` solves one shortfall
//! program, and `backtest`/`coverage`/`export-params` evaluate the whole
//! strategy suite. Exit codes: 0 success, 2 configuration/usage, 3 data or
//! I/O, 4 numerical/infeasible.

mod commands;
mod config;
mod sio;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gfagru::Error;

use commands::Ctx;

#[derive(Parser)]
#[command(
    name = "gfagru",
    version,
    about = "Dynamic factor-model scenario generation and CVaR portfolios"
)]
struct Cli {
    /// TOML configuration file; omitted sections use built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one configuration value (repeatable), e.g.
    /// --set portfolio.q=0.99 or --set data.market='"SPX"'.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a price CSV and optionally rewrite it in normalized form.
    Ingest {
        /// Input price table (date column plus one column per ticker).
        input: PathBuf,
        /// Write the normalized table here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Generate a synthetic price panel from the [synth] settings.
    Synth {
        /// Output CSV; defaults to the configured data.prices path.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also write the generator parameters as JSON.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Fit the ensemble on the training segment and save it.
    Train,
    /// Produce one-step-ahead factor models at every rebalance date.
    Forecast {
        /// Output JSON; defaults to <output_dir>/forecasts.json.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Draw a scenario matrix from one forecast date.
    Simulate {
        /// Index into the forecast dates (0 = first rebalance).
        #[arg(long, default_value_t = 0)]
        date_index: usize,
        /// Output CSV; defaults to <output_dir>/scenarios_<index>.csv.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Solve one shortfall program over a stored scenario matrix.
    Optimize {
        /// Scenario CSV, as written by `simulate`.
        scenarios: PathBuf,
        /// Required expected monthly portfolio return.
        #[arg(long, default_value_t = 0.01)]
        target: f64,
        /// Also write the weights as CSV.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run every configured strategy over the test segment.
    Backtest {
        /// Also run the value-at-risk coverage diagnostics.
        #[arg(long)]
        coverage: bool,
    },
    /// Value-at-risk coverage tests for the trained model.
    Coverage {
        /// Output CSV; defaults to <output_dir>/coverage.csv.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Export the forecasted coefficient paths as CSV.
    ExportParams {
        /// Output CSV; defaults to <output_dir>/parameters.csv.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() || matches!(e, Error::Infeasible(_)) {
        4
    } else if matches!(e, Error::Config(_) | Error::Shape { .. }) {
        2
    } else {
        3
    }
}

fn run(cli: Cli) -> gfagru::Result<()> {
    let (config, hash) = config::load(cli.config.as_deref(), &cli.set)?;
    let ctx = Ctx { config, hash };
    match cli.command {
        Command::Ingest { input, output } => {
            commands::cmd_ingest(&ctx, &input, output.as_deref())
        }
        Command::Synth { output, truth } => {
            commands::cmd_synth(&ctx, output.as_deref(), truth.as_deref())
        }
        Command::Train => commands::cmd_train(&ctx),
        Command::Forecast { output } => commands::cmd_forecast(&ctx, output.as_deref()),
        Command::Simulate { date_index, output } => {
            commands::cmd_simulate(&ctx, date_index, output.as_deref())
        }
        Command::Optimize {
            scenarios,
            target,
            output,
        } => commands::cmd_optimize(&ctx, &scenarios, target, output.as_deref()),
        Command::Backtest { coverage } => commands::cmd_backtest(&ctx, coverage),
        Command::Coverage { output } => commands::cmd_coverage(&ctx, output.as_deref()),
        Command::ExportParams { output } => commands::cmd_export_params(&ctx, output.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
