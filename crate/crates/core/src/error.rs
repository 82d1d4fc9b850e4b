use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("image side {side} is not divisible by {divisor}")]
    NotDivisible { side: usize, divisor: usize },
    #[error("tap index {index} outside 1..={depth}")]
    TapOutOfRange { index: usize, depth: usize },
    #[error("unsupported target scale 1/{0}")]
    UnsupportedScale(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown variant `{0}` (expected full, learned_only, general_only, general_small, no_se)")]
    UnknownVariant(String),
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("missing file or directory {}", .0.display())]
    Missing(PathBuf),
    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: u64, value: f64 },
    #[error("checkpoint was written for model config {found}, current config is {expected}")]
    ConfigHashMismatch { expected: String, found: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Validation problems (bad input or config) as opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::NotDivisible { .. }
                | Error::TapOutOfRange { .. }
                | Error::UnsupportedScale(_)
                | Error::ShapeMismatch(_)
                | Error::InvalidArgument(_)
                | Error::InvalidConfig(_)
                | Error::UnknownVariant(_)
                | Error::Empty(_)
                | Error::Missing(_)
                | Error::ConfigHashMismatch { .. }
                | Error::Toml(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
