//! `en`: run a backend node, manage the registry file, run simulations.

mod registry_cmd;
mod serve;
mod sim_cmd;

use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::LevelFilter;

/// Exit status of a command that ran but failed (bad input file, rejected
/// record, failed simulation verdict). Usage errors exit with 2 via clap.
const EXIT_FAILURE: u8 = 1;

#[derive(Debug, Parser)]
#[command(name = "en", version, about = "Federated exposure-notification backend tools")]
struct Cli {
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: LevelFilter,
    /// Time source for `serve`. Simulations always use simulated time.
    #[arg(long, global = true, value_enum, default_value_t = ClockKind::Real)]
    clock: ClockKind,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClockKind {
    /// Wall-clock time.
    Real,
    /// Starts at wall-clock time and runs one 15-minute interval per second.
    Simulated,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a backend node over mutually authenticated HTTPS.
    Serve(serve::ServeArgs),
    /// Inspect and edit a registry file.
    #[command(subcommand)]
    Registry(registry_cmd::RegistryCommand),
    /// Run scenarios and back-of-envelope estimates.
    #[command(subcommand)]
    Sim(sim_cmd::SimCommand),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp_millis()
        .init();
    let result = match cli.command {
        Command::Serve(args) => serve::run(args, cli.clock),
        Command::Registry(cmd) => registry_cmd::run(cmd),
        Command::Sim(cmd) => sim_cmd::run(cmd),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAILURE),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
