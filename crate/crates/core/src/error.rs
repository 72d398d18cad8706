use std::io;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller supplied an argument that violates an operation's preconditions.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// The operation was invoked on an object that is not in a usable state.
    #[error("invalid state: {0}")]
    InvalidState(String),
    /// A binary or text file did not have the expected layout.
    #[error("format error: {0}")]
    Format(String),
    /// A configuration file could not be parsed or validated.
    #[error("config error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Config { line: Option<usize>, message: String },
    /// Training produced a non-finite loss.
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! invalid_arg {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(format!($($arg)*))
    };
}

macro_rules! invalid_state {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidState(format!($($arg)*))
    };
}

pub(crate) use invalid_arg;
pub(crate) use invalid_state;
