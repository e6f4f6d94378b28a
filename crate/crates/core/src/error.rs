use std::path::PathBuf;

/// Errors raised by the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("singular system: matrix is not positive definite")]
    SingularSystem,
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("user (cell {cell}, index {user}) does not transmit in RB {rb}")]
    NotTransmitting { cell: usize, user: usize, rb: usize },
    #[error("user (cell {cell}, index {user}) is already decoded")]
    AlreadyDecoded { cell: usize, user: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
