mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use commands::{Cli, CliError};

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("CVRLAB_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: CVRLAB_THREADS: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Usage(_) => 2,
                CliError::Data(_) => 3,
                CliError::Numeric(_) => 4,
            })
        }
    }
}
