use std::path::PathBuf;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dataset schema error: column `{column}` not found in header")]
    MissingColumn { column: String },

    #[error("dataset row {row}: {reason}")]
    Row { row: usize, reason: String },

    #[error("malformed delimited input: {0}")]
    Csv(#[from] csv::Error),

    #[error("cannot derive a taxonomy from an empty label space")]
    EmptyLabelSpace,

    #[error("subcategory assigned to more than one category: {}", format_conflicts(.conflicts))]
    AmbiguousSubcategory {
        /// (subcategory, first category, conflicting category)
        conflicts: Vec<(String, String, String)>,
    },

    #[error("label `{label}` is not part of the taxonomy")]
    UnknownLabel { label: String },

    #[error("embedding file line {line}: {reason}")]
    EmbeddingParse { line: usize, reason: String },

    #[error("embedding file line {line}: duplicate token `{token}`")]
    DuplicateToken { line: usize, token: String },

    #[error("unsupported embedding format: {0}")]
    UnsupportedFormat(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in layer `{layer}`")]
    NonFinite { layer: String },

    #[error("validation metric is NaN at epoch {epoch}: {diagnostics}")]
    NanMetric { epoch: usize, diagnostics: String },

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("model container integrity check failed: {0}")]
    Integrity(String),

    #[error("incompatible model container version {found} (this build reads {supported})")]
    IncompatibleVersion { found: String, supported: String },

    #[error("malformed model container: {0}")]
    MalformedContainer(String),

    #[error("config error for `{key}`: {reason}")]
    Config { key: String, reason: String },
}

fn format_conflicts(conflicts: &[(String, String, String)]) -> String {
    conflicts
        .iter()
        .map(|(s, a, b)| format!("`{s}` under `{a}` and `{b}`"))
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) | Error::Config { .. } => ErrorKind::Usage,
            Error::NonFinite { .. } | Error::NanMetric { .. } => ErrorKind::Numeric,
            Error::Fold { source, .. } => source.kind(),
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
