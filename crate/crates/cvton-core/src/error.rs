//! Error taxonomy for the pipeline.
//!
//! Errors are grouped by *who can fix them*, and each group maps onto the
//! process exit code used by the `cvton` binary:
//!
//! * `Config` / `Shape` — the invocation or configuration is wrong (exit 1).
//!   Shape errors are raised at network construction time, e.g. asking for
//!   more downsampling stages than the input resolution supports.
//! * `Data` / `Io` — the dataset on disk is missing or corrupt (exit 2).
//! * `Numeric` / `Checkpoint` — a runtime failure: a singular system, a
//!   non-finite loss, or a checkpoint that does not match the configured
//!   architecture (exit 3).
//!
//! Internal invariants (mismatched tensor shapes inside an op, indexing bugs)
//! are `panic!`s/`assert!`s, not `Error` variants: they indicate a bug in this
//! crate, not a problem the caller can correct.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad flags, unparseable config files, or inconsistent option values.
    #[error("config error: {0}")]
    Config(String),

    /// Requested architecture is impossible at the given resolution.
    #[error("shape error: {0}")]
    Shape(String),

    /// Dataset files missing, unreadable, or failing validation.
    #[error("data error: {0}")]
    Data(String),

    /// Underlying I/O failure while reading or writing artifacts.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Numerical failure: singular TPS system, non-finite loss, bad covariance.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Checkpoint unreadable or incompatible with the current configuration.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    /// Process exit code for the CLI: 1 usage, 2 data, 3 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 1,
            Error::Data(_) | Error::Io(_) => 2,
            Error::Numeric(_) | Error::Checkpoint(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_usage_data_runtime_split() {
        assert_eq!(Error::Config("x".into()).exit_code(), 1);
        assert_eq!(Error::Shape("x".into()).exit_code(), 1);
        assert_eq!(Error::Data("x".into()).exit_code(), 2);
        assert_eq!(Error::Io(std::io::Error::other("x")).exit_code(), 2);
        assert_eq!(Error::Numeric("x".into()).exit_code(), 3);
        assert_eq!(Error::Checkpoint("x".into()).exit_code(), 3);
    }
}
