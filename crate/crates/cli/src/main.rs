//! `nesp`: command-line front end. Exit codes: 0 success, 2 usage error,
//! 3 configuration error, 4 numerical failure.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use crate::commands::Command;
use crate::config::CliError;
use crate::output::{default_out_dir, Ctx};

#[derive(Debug, Parser)]
#[command(name = "nesp", version, about = "Numerical analysis of normally elliptic singularly perturbed systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory; defaults to $NESP_OUT_DIR, then ./nesp-out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for the parallel sweeps.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Resolve the configuration and print the plan without computing.
    #[arg(long, global = true)]
    dry_run: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if n == 0 {
            return fail(&CliError::Usage("--jobs must be at least 1".into()));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail(&CliError::Config(format!("cannot start {n} workers: {e}")));
        }
    }
    let mut ctx = Ctx::new(cli.command.name(), default_out_dir(cli.out), cli.dry_run);
    let outcome = cli.command.run(&mut ctx);
    // Usage errors happen before anything is resolved; no manifest for them.
    if !matches!(outcome, Err(CliError::Usage(_))) {
        if let Err(e) = ctx.finish(&outcome) {
            eprintln!("nesp: {e}");
        }
    }
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("nesp: {e}");
    ExitCode::from(e.exit_code() as u8)
}
