use thiserror::Error;

/// Every failure the binary reports. Each maps to one exit code and one
/// machine-parsable prefix.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            CliError::Config(_) => "E_CONFIG",
            CliError::Data(_) => "E_DATA",
            CliError::Runtime(_) => "E_RUNTIME",
        }
    }

    /// `TAG: message` on one line.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("{}: {}", self.tag(), msg.trim())
    }
}

impl From<krt_core::Error> for CliError {
    fn from(e: krt_core::Error) -> Self {
        use krt_core::Error as E;
        match e {
            E::Config(_) => CliError::Config(e.to_string()),
            E::Data(_) | E::Format(_) | E::Checksum { .. } | E::UndefinedAp { .. } => CliError::Data(e.to_string()),
            E::SessionOutOfRange { .. } | E::Tensor(_) | E::Io(_) => CliError::Runtime(e.to_string()),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub(crate) fn io_data(path: &std::path::Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

pub(crate) fn io_runtime(path: &std::path::Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}
