use thiserror::Error;

/// Crate-wide error type.
///
/// Variants map onto the CLI exit-code classes: configuration and
/// data/format problems exit 2, everything else that fails at runtime
/// exits 3 (usage errors are handled by the argument parser and exit 1).
#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration value or unknown stage identifier.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// A required file or directory does not exist.
    #[error("not found: {0}")]
    NotFound(String),

    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Scalar argument outside its valid range.
    #[error("range error: {0}")]
    Range(String),

    /// Object discovery found no candidate boxes in any frame.
    #[error("empty track: no candidate boxes in any frame")]
    EmptyTrack,

    /// A training batch is missing one of its domain sides.
    #[error("batch error: {0}")]
    Batch(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Exit-code class for the CLI: 2 for data/format/config trouble,
    /// 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Data(_) | Error::NotFound(_) => 2,
            _ => 3,
        }
    }
}
