use alloc::string::String;

/// Crate-wide result type.
pub type Result<T> = core::result::Result<T, Error>;

/// Errors surfaced by the library.
///
/// Contract violations are caller bugs (bad shapes, empty masks, invalid
/// hyperparameters); numerical failures are runtime conditions (NaN/Inf in a
/// loss or gradient) that abort training with enough context to locate the
/// source.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A hyperparameter or configuration value is outside its valid range.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A non-finite value appeared where the math requires finite ones.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
