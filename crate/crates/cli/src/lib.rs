//! Command-line driver for `attconv`: training, evaluation, gradient
//! checks, attention-map export, parameter tables and synthetic data.
//!
//! Every subcommand is a plain function writing to a caller-supplied sink,
//! so it can be driven from tests as well as from the binary.

pub mod attmap;
pub mod checkpoint;
pub mod commands;
pub mod config;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use commands::{
    cmd_attmap, cmd_eval, cmd_gradcheck, cmd_params, cmd_synth, cmd_train, AttmapArgs, EvalArgs, GradcheckArgs,
    MapFormat, ParamsArgs, SynthArgs, SynthTask, TrainArgs,
};
pub use config::ConfigFile;

/// Failure of a subcommand, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Gradient check ran but did not pass.
    #[error("{0}")]
    CheckFailed(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<attconv::Error> for CliError {
    fn from(e: attconv::Error) -> Self {
        use attconv::Error as E;
        let msg = e.to_string();
        match e {
            E::Format { .. } | E::Io { .. } | E::EmptyContext(_) | E::EmptyInput(_) => CliError::Data(msg),
            E::NonFinite(_) | E::Determinism(_) => CliError::Numeric(msg),
            E::Dimension { .. } | E::Contract(_) | E::Config(_) => CliError::Config(msg),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Version { .. } | CheckpointError::Model(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
