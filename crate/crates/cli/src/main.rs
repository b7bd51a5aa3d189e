use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use din_cli::commands::{self, Ctx};
use din_cli::config::parse_costs;
use din_cli::{Overrides, Result, RunConfig};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "din", version, about = "Deep inception network backtests")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output base directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Comma-separated cost grid in bps, e.g. "0,0.5,1,2,5".
    #[arg(long, global = true)]
    costs: Option<String>,

    /// Model variant as FE:PS, e.g. "FlexCIM:TFT".
    #[arg(long, global = true)]
    variant: Option<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Load and winsorise a price CSV.
    Ingest,
    /// Generate the configured synthetic panel.
    Synth,
    /// Fit the walk-forward ensemble.
    Train,
    /// Run the hyperparameter tuner only.
    Tune,
    /// Data, training and report in one go.
    Backtest,
    /// Metrics tables, cost sweep and rolling plots.
    Report,
    /// Attention and variable-selection exports.
    Interpret,
    /// Parameter-count tables and log-log slopes.
    Complexity,
}

fn run(cli: Cli) -> Result<String> {
    let overrides = Overrides {
        out: cli.out,
        seed: cli.seed,
        costs: cli.costs.as_deref().map(parse_costs).transpose()?,
        variant: cli.variant,
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let ctx = Ctx::new(cfg);
    commands::write_resolved_config(&ctx)?;
    match cli.command {
        Command::Ingest => commands::cmd_ingest(&ctx)?,
        Command::Synth => commands::cmd_synth(&ctx)?,
        Command::Train => commands::cmd_train(&ctx)?,
        Command::Tune => commands::cmd_tune(&ctx)?,
        Command::Backtest => commands::cmd_backtest(&ctx)?,
        Command::Report => commands::cmd_report(&ctx)?,
        Command::Interpret => commands::cmd_interpret(&ctx)?,
        Command::Complexity => commands::cmd_complexity(&ctx)?,
    }
    Ok(ctx.root.display().to_string())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(root) => {
            println!("outputs: {root}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
