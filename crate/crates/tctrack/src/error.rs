//! Error type shared across the crate.
//!
//! Every fallible operation returns [`Result`]. Variants are grouped by
//! failure class so the command-line layer can map them onto process exit
//! codes: bad input or malformed data exits with code 2, numeric failures
//! (non-finite values appearing mid-computation) exit with code 3.

use std::fmt;
use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All error conditions produced by this crate.
#[derive(Debug)]
pub enum Error {
    /// Two tensor arguments had incompatible shapes for an operation.
    Shape {
        /// Name of the operation that rejected its arguments.
        op: &'static str,
        /// Shape of the left/first argument.
        lhs: Vec<usize>,
        /// Shape of the right/second argument.
        rhs: Vec<usize>,
    },
    /// An API contract was violated (bad argument combination, wrong call
    /// order, out-of-range index). These indicate a programming error in
    /// the caller rather than bad user data.
    Contract(String),
    /// User-supplied data was rejected (unknown word, empty sentence,
    /// pixel values outside `[0, 1]`, mismatched label lengths, ...).
    Input(String),
    /// A file could not be read or written.
    Io {
        /// Path of the file involved.
        path: PathBuf,
        /// Underlying I/O error.
        source: std::io::Error,
    },
    /// A file or byte stream did not match its expected format
    /// (checkpoint container, dataset manifest, frame file, config).
    Format(String),
    /// The annotation endpoint could not be reached or returned a
    /// transport-level failure. Retrying may succeed.
    AnnotationNetwork(String),
    /// The annotation endpoint answered, but the body could not be parsed
    /// into word labels. Carries the raw response for diagnosis.
    AnnotationFormat {
        /// Why parsing failed.
        reason: String,
        /// Raw response body as received.
        raw: String,
    },
    /// A computation produced a non-finite value (NaN or infinity).
    NonFinite(String),
}

impl Error {
    /// Process exit code for this error when surfaced by the CLI:
    /// `3` for numeric failures, `2` for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) => 3,
            _ => 2,
        }
    }

    /// True if retrying the same call could plausibly succeed
    /// (currently only transport failures while annotating).
    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::AnnotationNetwork(_))
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Input(msg) => write!(f, "invalid input: {msg}"),
            Error::Io { path, source } => {
                write!(f, "i/o error on {}: {source}", path.display())
            }
            Error::Format(msg) => write!(f, "malformed data: {msg}"),
            Error::AnnotationNetwork(msg) => {
                write!(f, "annotation endpoint unreachable: {msg}")
            }
            Error::AnnotationFormat { reason, raw } => {
                write!(f, "unparseable annotation response ({reason}): {raw:?}")
            }
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

/// Convenience constructor for [`Error::Io`].
pub fn io_err(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
    Error::Io { path: path.into(), source }
}
