//! `genie`: reproducible batch commands over the engine's modules.
//!
//! Every command writes its module's artifacts plus a `run_manifest.json`
//! (config hash, seed, versions; no timestamps) and exits 0. Failures print
//! one machine-readable JSON object to stderr and exit 1 (config error),
//! 2 (backend error), or 3 (data error).

mod backend;
mod commands;
mod error;
mod manifest;
mod trainer;

use clap::error::ErrorKind;
use clap::Parser;

use crate::commands::Cli;
use crate::error::CliError;

fn main() -> std::process::ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // --help and --version are not errors; anything else is a
            // config problem and must exit 1, not clap's default 2.
            if matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                err.exit();
            }
            return CliError::Config(err.to_string()).report();
        }
    };
    if let Some(jobs) = cli.jobs {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
        if let Err(e) = pool {
            return CliError::Config(format!("invalid --jobs: {e}")).report();
        }
    }
    match commands::run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(err) => err.report(),
    }
}
