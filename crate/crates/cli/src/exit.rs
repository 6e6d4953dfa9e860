use std::fmt::Display;
use std::path::Path;

pub const FAILURE: u8 = 1;
pub const BAD_CONFIG: u8 = 2;
pub const NO_DATASET: u8 = 3;
pub const CHECKPOINT: u8 = 4;
pub const OUTPUT_DIR: u8 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Display) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }

    pub fn config(message: impl Display) -> Self {
        Self::new(BAD_CONFIG, message)
    }

    pub fn checkpoint(path: &Path, message: impl Display) -> Self {
        Self::new(CHECKPOINT, format!("checkpoint {}: {message}", path.display()))
    }
}

/// Anything not classified at the call site is a plain failure.
impl From<maskfix::Error> for CliError {
    fn from(e: maskfix::Error) -> Self {
        Self::new(FAILURE, e)
    }
}

pub trait OrExit<T> {
    fn or_exit(self, code: u8) -> Result<T, CliError>;
}

impl<T, E: Display> OrExit<T> for Result<T, E> {
    fn or_exit(self, code: u8) -> Result<T, CliError> {
        self.map_err(|e| CliError::new(code, e))
    }
}
