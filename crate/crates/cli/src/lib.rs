//! Command-line experiments on synthetic sites: single training runs, the
//! data-addition and noise sweeps, theory checks, and SVG reports.

pub mod args;
pub mod commands;
pub mod config;
pub mod experiment;
pub mod svg;
pub mod sweep;

use std::fmt;

/// Bad flags, config files or input CSVs. Exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// An asserted theory property did not hold. Exit code 1.
#[derive(Debug)]
pub struct LemmaFailure(pub Vec<String>);

impl fmt::Display for LemmaFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "property check failed: {}", self.0.join(", "))
    }
}

impl std::error::Error for LemmaFailure {}

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_ABORTED: i32 = 3;

pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    if err.downcast_ref::<LemmaFailure>().is_some() {
        return EXIT_FAILURE;
    }
    match err.downcast_ref::<fdseg::Error>() {
        Some(fdseg::Error::TrainingAborted { .. }) => EXIT_ABORTED,
        Some(fdseg::Error::Io(_)) => EXIT_FAILURE,
        Some(_) => EXIT_USAGE,
        None => EXIT_FAILURE,
    }
}
