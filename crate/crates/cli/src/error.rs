use std::process::ExitCode;

/// CLI failures, split by exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad input, missing prerequisite or refused overwrite; exit status 2.
    #[error("{0}")]
    Precondition(String),
    #[error(transparent)]
    Core(#[from] fairflow::Error),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io { context: context.into(), source }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.status())
    }

    pub fn status(&self) -> u8 {
        use fairflow::Error as E;
        match self {
            CliError::Precondition(_) => 2,
            CliError::Core(
                E::Precondition(_)
                | E::InvalidPrompt(_)
                | E::EmptyCorpus(_)
                | E::InsufficientOccurrences { .. }
                | E::InsufficientCell { .. }
                | E::Parse { .. }
                | E::DimensionMismatch { .. }
                | E::LengthMismatch(_),
            ) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
