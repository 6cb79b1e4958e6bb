use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dynema_cli::{cmd_ablate, cmd_metrics, cmd_run, CliError, Overrides, PolicyKind};

#[derive(Parser)]
#[command(
    name = "dynema",
    version,
    about = "Continual-learning runs with a dynamic EMA policy"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one policy over the task sequence and write its artifacts.
    Run {
        #[command(flatten)]
        common: Common,
        /// plain, fixed or llaca
        #[arg(long)]
        policy: Option<PolicyKind>,
    },
    /// Run the plain, fixed and llaca arms with shared seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Summarize a stored accuracy matrix CSV.
    Metrics {
        /// Matrix in trainer or fixture layout.
        matrix: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Weight of the fixed EMA.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn overrides(&self, policy: Option<PolicyKind>) -> Overrides {
        Overrides {
            policy,
            beta: self.beta,
            seed: self.seed,
            out: self.out.clone(),
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    let mut err = std::io::stderr();
    match cli.command {
        Command::Run { common, policy } => cmd_run(
            common.config.as_deref(),
            &common.overrides(policy),
            &mut out,
            &mut err,
        )
        .map(drop),
        Command::Ablate { common } => cmd_ablate(
            common.config.as_deref(),
            &common.overrides(None),
            &mut out,
            &mut err,
        )
        .map(drop),
        Command::Metrics { matrix } => cmd_metrics(&matrix, &mut out).map(drop),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
