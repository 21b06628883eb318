//! `dcedit` command-line harness: localize → edit → eval, plus `selftest`.
//!
//! Exit codes: 0 success, 1 any other failure, 2 unknown item or nothing to
//! evaluate, 3 trace mismatch.

pub mod cli;
pub mod config;
pub mod pipeline;
pub mod selftest;

use std::path::PathBuf;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] dcedit_core::Error),
    #[error("no item with id `{0}` in manifest")]
    MissingItem(String),
    #[error("no results to evaluate in {}", .0.display())]
    EmptyResults(PathBuf),
    #[error("config: {0}")]
    Config(String),
    #[error("selftest: {0} suite(s) failed")]
    SelftestFailed(usize),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::MissingItem(_) | HarnessError::EmptyResults(_) => 2,
            HarnessError::Core(dcedit_core::Error::TraceMismatch(_)) => 3,
            _ => 1,
        }
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Core(e.into())
    }
}
