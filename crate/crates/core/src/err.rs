//! Error type shared across the core crate.

use alloc::string::String;

/// Errors produced by core computations and type constructors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoreError {
    /// Invalid configuration value or inconsistent hyperparameters.
    Config(String),
    /// Malformed or inconsistent input data (shapes, ids, label values).
    Data(String),
    /// Numeric failure: NaN or infinite value where a finite one is required.
    Numeric(String),
}

impl core::fmt::Display for CoreError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CoreError::Config(m) => write!(f, "config error: {m}"),
            CoreError::Data(m) => write!(f, "data error: {m}"),
            CoreError::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CoreError {}

/// Shorthand for results carrying a [`CoreError`].
pub type CoreResult<T> = core::result::Result<T, CoreError>;
