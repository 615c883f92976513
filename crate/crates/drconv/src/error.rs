use thiserror::Error;

/// Unified error type for the crate.
///
/// Numeric kernels use assertions for per-element index discipline (a bug in
/// the caller, not a recoverable state); everything a caller can plausibly
/// get wrong from the outside — shapes, configs, file formats — comes back
/// as a typed error.
#[derive(Debug, Error)]
pub enum Error {
    /// A dimension was zero/invalid or two sizes that must agree do not.
    #[error("size: {0}")]
    Size(String),

    /// Tensors or filters with incompatible shapes were combined.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An index (region id, layer name, element offset) is out of range.
    #[error("index: {0}")]
    Index(String),

    /// A configuration value is invalid (named field in the message).
    #[error("config: {0}")]
    Config(String),

    /// A backward pass was handed a context that does not match its inputs.
    #[error("context: {0}")]
    Context(String),

    /// A file or byte stream does not conform to its documented format.
    #[error("format: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// Training produced a non-finite loss or parameter and stopped.
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
