use std::io;

/// Errors surfaced by every fallible operation in the crate.
///
/// The variants line up with the CLI exit codes: `Usage` → 2, `Format` and
/// `Decode` → 3, `ModelMismatch` → 4, everything else → 5.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes, kernel sizes or architecture settings that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// The caller asked for something meaningless (k = 0, non-scalar loss, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// A container, bitstream or patch-set file is malformed.
    #[error("format error: {0}")]
    Format(String),

    /// The arithmetic decoder ran out of input or met an inconsistent stream.
    #[error("decode error: {0}")]
    Decode(String),

    /// Entropy model, codec model and bitstream are not bound to each other.
    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
pub(crate) use config_err;
