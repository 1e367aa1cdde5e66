use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prior_attn::commands;
use prior_attn::config::{load_config, parse_overrides, RunConfig};
use prior_attn::{CliError, CliResult};

/// Attention priors in a small transformer world model.
///
/// Settings come from defaults, then `--config FILE` (`key = value` lines),
/// then `--key value` overrides.
#[derive(Parser)]
#[command(name = "prior-attn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run (the first seed).
    Train(Settings),
    /// Train every seed, and every kind listed in `variants`.
    Sweep(Settings),
    /// Compare none, l1, l2 and maxnorm span penalties on two horizons.
    AblateReg(Settings),
    /// Vary the initial span, offset and width.
    AblateInit(Settings),
    /// Parameter and FLOP overhead of each attention kind.
    Overhead(Settings),
    /// Rebuild aggregate CSVs and figures from run directories.
    Report {
        /// Output directory of an earlier command.
        dir: PathBuf,
    },
}

#[derive(Args)]
struct Settings {
    /// Plain-text `key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `--key value` or `--key=value` overrides.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

impl Settings {
    fn load(&self) -> CliResult<RunConfig> {
        load_config(self.config.as_deref(), &parse_overrides(&self.overrides)?)
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(s) => commands::train(&s.load()?).map(drop),
        Command::Sweep(s) => commands::sweep(&s.load()?).map(drop),
        Command::AblateReg(s) => commands::ablate_reg(&s.load()?).map(drop),
        Command::AblateInit(s) => commands::ablate_init(&s.load()?).map(drop),
        Command::Overhead(s) => {
            let text = match &s.config {
                Some(p) => Some(std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?),
                None => None,
            };
            let config = commands::overhead_config(text.as_deref(), &parse_overrides(&s.overrides)?)?;
            commands::overhead(&config).map(drop)
        }
        Command::Report { dir } => commands::report(&dir),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
