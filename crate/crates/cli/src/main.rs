use std::process::ExitCode;

use clap::Parser;
use slicegap_cli::{run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(n) = std::env::var("SLICEGAP_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                {
                    log::warn!("SLICEGAP_THREADS ignored: {e}");
                }
            }
            _ => {
                eprintln!("error: SLICEGAP_THREADS must be a positive integer, got `{n}`");
                return ExitCode::from(2);
            }
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
