//! Command-line front end for the iltm-core library: meta-training with
//! per-task embedding caches, per-dataset fit and prediction, metric
//! evaluation, corpus deduplication, gradient checking, and hyperparameter
//! sampling. Every command resolves a flat key=value configuration, writes a
//! manifest that doubles as a rerunnable config file, and exits with a code
//! that separates configuration, data, and numeric failures.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod tasks;

use iltm_core::error::Error;

/// Exit code classes: 0 success, 2 configuration, 3 data or file handling,
/// 4 numeric failure. Argument parse errors also exit 2 (via clap).
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Io(_) | Error::Schema(_) | Error::Data(_) | Error::Format(_) => 3,
        Error::Numeric(_) | Error::UndefinedMetric(_) => 4,
    }
}
