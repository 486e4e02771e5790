use std::process::ExitCode;

use clap::Parser;

use rslab::args::{invocation, Cli, Invocation};
use rslab::{execute, exit_code, rerun};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("RSLAB_THREADS").ok().and_then(|v| v.parse().ok()) {
        rslab_core::parallel::init_threads(n);
    }
    let result = invocation(Cli::parse()).and_then(|inv| match inv {
        Invocation::Run(rc) => execute(&rc),
        Invocation::Rerun { run_file, out } => rerun(&run_file, out),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
