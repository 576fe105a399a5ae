use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Two grids that must agree on dimensions do not.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Non-finite voxel, out-of-set mask value or similar payload defect.
    #[error("data integrity: {0}")]
    DataIntegrity(String),

    #[error("index out of range: {0}")]
    Index(String),

    /// A caller-side precondition was violated.
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("phantom generation failed (seed {seed}): {reason}")]
    Generation { seed: u64, reason: String },

    #[error("training error: {0}")]
    Training(String),

    /// Metric requested on input that cannot define it (e.g. single-class AUC).
    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("study id mismatch: {0}")]
    IdMismatch(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported format version {found} in {path} (supported: {supported})")]
    Version {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("checksum mismatch for {path}")]
    Checksum { path: PathBuf },

    #[error("payload length mismatch for {path}: expected {expected} bytes, found {found}")]
    Length {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    /// A JSON document is malformed or a field violates its schema.
    #[error("schema violation in {path}: {field}: {reason}")]
    Schema {
        path: PathBuf,
        field: String,
        reason: String,
    },

    /// A manifest points at a file that does not exist.
    #[error("referential error: {0}")]
    Reference(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used in machine-readable CLI output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::DataIntegrity(_) => "data_integrity",
            Error::Index(_) => "index",
            Error::Precondition(_) => "precondition",
            Error::Config(_) => "config",
            Error::Generation { .. } => "generation",
            Error::Training(_) => "training",
            Error::Undefined(_) => "undefined",
            Error::IdMismatch(_) => "id_mismatch",
            Error::Io { .. } => "io",
            Error::Version { .. } => "version",
            Error::Checksum { .. } => "checksum",
            Error::Length { .. } => "length",
            Error::Schema { .. } => "schema",
            Error::Reference(_) => "reference",
        }
    }
}
