use std::path::PathBuf;
use std::process::ExitCode;

use atlas_cli::{run, Command};
use clap::Parser;

/// Experiments on the general solutions of Bellman/HJB equations.
#[derive(Parser)]
#[command(name = "atlas", version)]
struct Args {
    command: Command,
    /// JSON config; relative paths inside it resolve against its directory.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; must not exist yet.
    #[arg(long)]
    out: PathBuf,
    /// Seeds replacing the config's seed list.
    #[arg(long = "seed", num_args = 1..)]
    seeds: Vec<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    if let Ok(v) = std::env::var("ATLAS_THREADS") {
        match v.parse::<usize>() {
            Ok(threads) if threads > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
                    log::warn!("cannot size thread pool: {e}");
                }
            }
            _ => {
                eprintln!("error: ATLAS_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        }
    }
    match run(args.command, &args.config, &args.out, &args.seeds) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
