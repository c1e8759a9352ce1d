//! Error taxonomy shared by every module.
//!
//! Four classes map one-to-one onto CLI exit codes: configuration problems
//! (bad files, violated invariants), input problems (malformed samples),
//! numeric problems (NaN/Inf escaping an op), and state problems (API misuse
//! such as a second backward pass without reset).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad key, violated invariant, shape mismatch at build time.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid input data: out-of-vocab token, waveform too short, degenerate sample.
    #[error("input error: {0}")]
    Input(String),

    /// Non-finite value produced by a named op, or an oracle breached tolerance.
    #[error("numeric error in `{op}`: {msg}")]
    Numeric { op: String, msg: String },

    /// API misuse: double backward, mismatched parameter sets, bad index state.
    #[error("state error: {0}")]
    State(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn numeric(op: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Numeric { op: op.into(), msg: msg.into() }
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    /// Process exit code for this error class. 0 is reserved for success,
    /// 1 for errors outside the taxonomy.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Input(_) => 3,
            Error::Numeric { .. } => 4,
            Error::State(_) => 5,
            Error::Io(_) => 6,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct() {
        let errs = [
            Error::config("x"),
            Error::input("x"),
            Error::numeric("op", "x"),
            Error::state("x"),
        ];
        let mut codes: Vec<i32> = errs.iter().map(|e| e.exit_code()).collect();
        codes.sort_unstable();
        codes.dedup();
        assert_eq!(codes.len(), 4);
        assert!(!codes.contains(&0));
    }
}
