use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use unlearn_cli::commands::{comparison_table, Outcome};
use unlearn_cli::{cmd_ablate, cmd_baseline, cmd_emit_plots, cmd_run, CliError, Overrides};

#[derive(Parser)]
#[command(name = "unlearn", version, about = "Hierarchy-guided dual-strategy unlearning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit, unlearn with the configured variant and evaluate, per seed.
    Run(RunArgs),
    /// Run all five variants on shared seeds.
    Ablate(RunArgs),
    /// Run plain gradient ascent next to the configured variant.
    Baseline(RunArgs),
    /// Write plot series (CSV) for an existing run directory.
    EmitPlots {
        /// Run directory; defaults to --out.
        run_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the configured seed list with this one seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<String>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            out: self.out.clone(),
            seed: self.seed,
            variant: self.variant.clone(),
        }
    }
}

fn report(outcome: Outcome) {
    print!("{}", comparison_table(&outcome.rows));
    println!("wrote {}", outcome.dir.display());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: Result<(), CliError> = match &cli.command {
        Command::Run(a) => cmd_run(&a.config, &a.overrides()).map(report),
        Command::Ablate(a) => cmd_ablate(&a.config, &a.overrides()).map(report),
        Command::Baseline(a) => cmd_baseline(&a.config, &a.overrides()).map(report),
        Command::EmitPlots { run_dir, out } => match run_dir.as_ref().or(out.as_ref()) {
            Some(dir) => cmd_emit_plots(dir).map(|files| {
                for f in files {
                    println!("wrote {}", f.display());
                }
            }),
            None => Err(CliError::Config("emit-plots needs a run directory".into())),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
