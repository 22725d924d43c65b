use std::fmt;

use remix_core::Error;

/// Process exit codes.
pub mod code {
    pub const FAILURE: i32 = 1;
    /// Missing or unreadable dataset, or an empty evaluation split.
    pub const DATA: i32 = 2;
    /// Checkpoint missing, malformed or inconsistent.
    pub const CHECKPOINT: i32 = 3;
    /// Posterior visualization of a model whose latent space is not 2-D.
    pub const LATENT_DIM: i32 = 4;
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: String) -> Self {
        Self { code, message }
    }

    pub fn config(message: String) -> Self {
        Self::new(code::FAILURE, message)
    }

    pub fn data(err: Error) -> Self {
        Self::new(code::DATA, format!("cannot load dataset: {err}"))
    }

    pub fn checkpoint(err: Error) -> Self {
        Self::new(code::CHECKPOINT, format!("cannot load checkpoint: {err}"))
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        Self::new(code::FAILURE, err.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}
