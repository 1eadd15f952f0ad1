//! Process-level error taxonomy. Exit codes: 1 for a failed run assertion,
//! 2 for usage or config problems, 3 for missing or unwritable files.

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    File(String),
    #[error("assertion failed: {0}")]
    Assertion(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Assertion(_) => 1,
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::File(_) => 3,
        }
    }
}
