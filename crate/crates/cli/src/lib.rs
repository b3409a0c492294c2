//! Command-line experiments: training, evaluation, the module ablation and
//! map export.

pub mod commands;
pub mod config;
pub mod heatmap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] sdaa_core::Error),
}

impl CliError {
    /// 2 for configuration problems, 3 for failures while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Runtime(sdaa_core::Error::Config(_)) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}
