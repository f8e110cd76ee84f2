//! Command-line front end for the tiered embedding store.

pub mod commands;
pub mod config;
pub mod run;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{Config, ConfigError};
pub use run::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),

    #[error("{0}")]
    Runtime(#[from] sdm_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub queries: Option<u64>,
    pub profile: Option<String>,
    pub policy: Option<String>,
    pub fm_budget_bytes: Option<u64>,
    pub len_threshold: Option<usize>,
    pub deprune: Option<bool>,
    pub mode: Option<String>,
    pub out: Option<PathBuf>,
}
