use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid noise schedule: {0}")]
    Schedule(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss {loss} in batch {batch}")]
    NonFiniteLoss { batch: usize, loss: f64 },

    #[error(
        "training diverged in epoch {epoch}: loss {loss:.4e} exceeds 1000x initial {initial:.4e} \
         (seed {seed}, config {config})"
    )]
    Diverged {
        epoch: usize,
        loss: f64,
        initial: f64,
        seed: u64,
        config: String,
    },

    #[error("action queue protocol violation: {0}")]
    Protocol(String),

    #[error("{what} mismatch: expected {expected}, found {found}")]
    Mismatch {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("unsupported {what} version {found} (this build reads version {expected})")]
    Version {
        what: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("corrupt {what}: {detail}")]
    Corrupt { what: &'static str, detail: String },

    #[error("window index {index} out of range ({len} windows)")]
    OutOfRange { index: usize, len: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
