//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error(
        "{op}: shape mismatch, left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}"
    )]
    Shape {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    /// A caller-supplied argument is out of its documented domain.
    #[error("invalid parameter `{name}`: {reason}")]
    Param { name: &'static str, reason: String },

    /// A value that must be finite is NaN or infinite.
    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    /// Iterative factorization failed to converge.
    #[error("SVD did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },

    /// Training produced a non-finite loss and was aborted.
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: u64 },

    /// An optimizer update was refused because the gradient is not finite.
    #[error("non-finite gradient at step {step}; update refused")]
    BadGradient { step: u64 },

    /// A forward cache was replayed against a model it does not belong to.
    #[error("forward cache does not match model: {reason}")]
    CacheMismatch { reason: String },

    /// Integer arithmetic left the representable range.
    #[error("{what} exceeds the supported range (2^63)")]
    Range { what: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// The file is not a valid container (bad magic, version, bounds, or metadata).
    #[error("invalid file format: {reason}")]
    Format { reason: String },

    /// Stored checksum does not match the payload bytes.
    #[error("integrity failure: checksum mismatch over payload bytes {offset}..{end}")]
    Integrity { offset: u64, end: u64 },

    /// A value cannot be represented in the requested storage dtype.
    #[error("value {value} is out of range for f32 storage")]
    DtypeOverflow { value: f64 },

    /// Recomputed frozen-factor digests differ from the checkpoint's.
    #[error("base weights do not match checkpoint for module `{module}` ({which} digest differs); wrong or altered base model")]
    BaseModelMismatch { module: String, which: &'static str },

    /// Required module names are absent.
    #[error("missing modules: {}", names.join(", "))]
    MissingModules { names: Vec<String> },

    /// Latent transfer between adapters of different ranks.
    #[error(
        "rank mismatch for module `{module}`: source rank {source_rank}, target rank {target_rank}"
    )]
    RankMismatch {
        module: String,
        source_rank: usize,
        target_rank: usize,
    },

    /// Another writer holds the registry lock.
    #[error("registry is locked by another writer (lock file {path})")]
    RegistryLocked { path: PathBuf },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
