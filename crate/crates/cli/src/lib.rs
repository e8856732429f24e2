//! Operator surface for pointssm: configuration, training, evaluation,
//! audits and diagnostics.

pub mod app;
pub mod commands;
pub mod config;
pub mod dataset;

use std::fmt;

pub use app::run;
pub use config::{RunConfig, OUT_ENV};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

/// Malformed command line or configuration.
#[derive(Debug)]
pub struct UsageError(pub String);

/// A diagnostic ran but its result is outside the accepted bounds.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}
impl std::error::Error for CheckFailed {}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    if err.downcast_ref::<CheckFailed>().is_some() {
        return EXIT_CHECK;
    }
    match err.downcast_ref::<pointssm_core::Error>() {
        Some(pointssm_core::Error::Config(_)) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}
