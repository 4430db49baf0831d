use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl CliError {
    pub fn with_context(self, ctx: &str) -> Self {
        match self {
            CliError::Config(m) => CliError::Config(format!("{ctx}: {m}")),
            CliError::Numerical(m) => CliError::Numerical(format!("{ctx}: {m}")),
            CliError::Io(m) => CliError::Io(format!("{ctx}: {m}")),
        }
    }
}

impl From<qvlbi::Error> for CliError {
    fn from(e: qvlbi::Error) -> Self {
        use qvlbi::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidParameter { .. } | E::ConfigMismatch(_) | E::ModeOutOfRange { .. } => CliError::Config(msg),
            E::InsufficientData(_) | E::Numerical(_) => CliError::Numerical(msg),
            E::Io { .. } | E::Format { .. } => CliError::Io(msg),
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}
