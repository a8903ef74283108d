use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    MissingDependency(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::MissingDependency(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    /// Wraps a library error with the item it concerns.
    pub fn context(what: &str, e: permex::Error) -> Self {
        use permex::Error as E;
        let msg = format!("{what}: {e}");
        match &e {
            _ if e.is_numerical() => CliError::Numerical(msg),
            E::DegenerateWindow(_) => CliError::Numerical(msg),
            E::InvalidParameter(_) | E::EmptyInput(_) | E::InsufficientSampling(_) => CliError::Validation(msg),
            E::Format(_) | E::Json(_) => CliError::MissingDependency(msg),
            E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => CliError::MissingDependency(msg),
            _ => CliError::Other(msg),
        }
    }

    pub fn io(what: impl std::fmt::Display, e: std::io::Error) -> Self {
        CliError::Other(format!("{what}: {e}"))
    }
}
