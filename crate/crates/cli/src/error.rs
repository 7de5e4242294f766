use std::process::ExitCode;

use thiserror::Error;
use treesync_core::ErrorCode;

#[derive(Debug, Error)]
pub enum CliError {
    /// The server refused the request.
    #[error("{code} {reason}")]
    Refused { code: &'static str, reason: String },
    #[error("transport: {0}")]
    Transport(String),
    #[error("invalid input: {0}")]
    Input(String),
}

impl CliError {
    pub fn from_err(code: ErrorCode, reason: String) -> Self {
        match code {
            ErrorCode::AuthRequired | ErrorCode::Denied => CliError::Refused {
                code: code.as_str(),
                reason,
            },
            ErrorCode::BadPath | ErrorCode::OverlappingPaths | ErrorCode::UnknownSub | ErrorCode::Malformed => {
                CliError::Input(format!("{} {reason}", code.as_str()))
            }
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Refused { .. } => 2,
            CliError::Transport(_) => 3,
            CliError::Input(_) => 4,
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Refused { .. } => "denied",
            CliError::Transport(_) => "transport",
            CliError::Input(_) => "input",
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Transport(e.to_string())
    }
}
