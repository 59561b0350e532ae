//! Library half of the `audiofault` CLI: commands, run configuration and
//! figure emission. The binary in `main.rs` is a thin argument-parsing
//! shell over this so the whole pipeline stays drivable in-process.

pub mod commands;
pub mod config;
pub mod figures;

use audiofault_core::error::Error;

/// Process exit codes; each failure class gets its own so scripts can
/// distinguish a bad flag from a bad dataset from a diverged run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Ok = 0,
    GenericFailure = 1,
    ConfigError = 2,
    DataError = 3,
    Divergence = 4,
    VerificationFailed = 5,
    UndefinedMetrics = 6,
}

pub fn exit_code_for(error: &Error) -> ExitStatus {
    match error {
        Error::Config(_) | Error::Range(_) => ExitStatus::ConfigError,
        Error::Divergence { .. } | Error::NonFiniteGradient { .. } => ExitStatus::Divergence,
        _ => ExitStatus::DataError,
    }
}
