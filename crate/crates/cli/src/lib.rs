//! Command implementations behind the `gmm-mcl` binary.
//!
//! Each command first turns its arguments into a fully validated plan (reading
//! inputs but writing nothing), then executes it. Validation failures map to
//! exit code 2 and execution failures to exit code 1.

// `!(x > y)` is the NaN-rejecting comparison used throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;

use config::ConfigError;

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

/// Environment variable that overrides the `workers` key.
pub const WORKERS_ENV: &str = "GMM_MCL_WORKERS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

/// Shorthand for a validation failure with a free-form message.
pub fn usage(message: impl Into<String>) -> CliError {
    CliError::Config(ConfigError::Other(message.into()))
}
