use std::process::ExitCode;

use clap::Parser;

use sdn_cli::config::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match sdn_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
