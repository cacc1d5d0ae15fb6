//! Command-line front end for the calibration library.
//!
//! Exit codes: 0 success, 1 bad input, 2 infeasible constraints, 3 solver
//! failure. stdout is data; diagnostics go to stderr.

mod commands;
mod io;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

#[derive(Parser)]
#[command(
    name = "memcal",
    version,
    about = "Survey calibration: weight adjustment under entropy-style priors, \
             instrument and projection estimators, efficiency reports, and a \
             replication harness",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: commands::Cmd,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<memcal::Error>() {
            return match e {
                memcal::Error::Infeasible(_) => 2,
                memcal::Error::Solver { .. } => 3,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            // Help and version go to stdout, usage errors to stderr.
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {:#}", err);
            ExitCode::from(exit_code(&err))
        }
    }
}
