//! Experiment runner: each command reads a JSON config and writes its
//! results into a fresh output directory.
//!
//! Exit codes: 0 success, 2 invalid input, 3 enumeration cap, 4 checkpoint
//! or config-hash mismatch, 1 anything else.

pub mod commands;
pub mod config;
pub mod output;

use atlas_core::AtlasError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Cap(String),
    #[error("{0}")]
    Checkpoint(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Cap(_) => 3,
            CliError::Checkpoint(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<AtlasError> for CliError {
    fn from(e: AtlasError) -> Self {
        let msg = e.to_string();
        match e {
            AtlasError::DimensionMismatch(_)
            | AtlasError::NotPsd { .. }
            | AtlasError::NotPd { .. }
            | AtlasError::SingularA
            | AtlasError::WrongMode(_)
            | AtlasError::InvalidDiscount(_)
            | AtlasError::InvalidConfig(_)
            | AtlasError::Json(_) => CliError::Validation(msg),
            AtlasError::EnumerationCap { .. } => CliError::Cap(msg),
            AtlasError::Checkpoint(_) => CliError::Checkpoint(msg),
            _ => CliError::Other(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Enumerate,
    FailureMode,
    Train,
    Eval,
    Tabular,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Enumerate => "enumerate",
            Command::FailureMode => "failure-mode",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Tabular => "tabular",
        }
    }
}

/// Runs `command` with the config at `config_path`, writing into `out`.
/// `seeds` replaces the config's seed list when non-empty.
pub fn run(command: Command, config_path: &std::path::Path, out: &std::path::Path, seeds: &[u64]) -> CliResult<()> {
    let raw = std::fs::read_to_string(config_path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", config_path.display())))?;
    let base = config_path.parent().map(|p| p.to_path_buf()).unwrap_or_default();
    let started = std::time::SystemTime::now();
    let dir = output::OutputDir::create(out)?;
    dir.write("config.json", raw.as_bytes())?;
    let ctx = commands::Context { base, seeds: seeds.to_vec() };
    let value: serde_json::Value = serde_json::from_str(&raw)?;
    match command {
        Command::Enumerate => commands::cmd_enumerate(&ctx, value, &dir)?,
        Command::FailureMode => commands::cmd_failure_mode(&ctx, value, &dir)?,
        Command::Train => commands::cmd_train(&ctx, value, &dir)?,
        Command::Eval => commands::cmd_eval(&ctx, value, &dir)?,
        Command::Tabular => commands::cmd_tabular(&ctx, value, &dir)?,
    }
    let meta = serde_json::json!({
        "command": command.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "started_unix": started.duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        "elapsed_seconds": started.elapsed().map(|d| d.as_secs_f64()).unwrap_or(0.0),
        "threads": rayon::current_num_threads(),
    });
    dir.write(output::META_FILE, serde_json::to_string_pretty(&meta)?.as_bytes())?;
    dir.commit()
}
