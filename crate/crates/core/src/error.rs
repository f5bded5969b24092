use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("mask decision selects special position {0}")]
    SpecialPositionMasked(usize),
    #[error("{}:{line}: {msg}", path.display())]
    Record {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{name} lexicon could not be read from {}: {source}", path.display())]
    Lexicon {
        name: &'static str,
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("duplicate domain `{0}`")]
    DuplicateDomain(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("config mismatch in field `{field}`: expected {expected}, found {found}")]
    ConfigMismatch {
        field: &'static str,
        expected: String,
        found: String,
    },
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("config: {0}")]
    Config(String),
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyCorpus => "empty_corpus",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Shape(_) => "shape",
            Error::SpecialPositionMasked(_) => "special_position_masked",
            Error::Record { .. } => "record",
            Error::Lexicon { .. } => "lexicon",
            Error::DuplicateDomain(_) => "duplicate_domain",
            Error::CorruptCheckpoint(_) => "corrupt_checkpoint",
            Error::CheckpointVersion { .. } => "checkpoint_version",
            Error::ConfigMismatch { .. } => "config_mismatch",
            Error::Diverged { .. } => "diverged",
            Error::Config(_) => "config",
            Error::EmptySplit(_) => "empty_split",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Wraps an i/o error with the path it concerns.
pub fn io_at(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}
