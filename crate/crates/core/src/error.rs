use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, EftError>;

#[derive(Debug, Error)]
pub enum EftError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid EFT spec: {0}")]
    InvalidSpec(String),

    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),

    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("unknown task {0}")]
    UnknownTask(usize),

    #[error("task {0} is not finalized yet; finalize it before adding a new task")]
    UnfinalizedTask(usize),

    #[error("task {0} is already finalized")]
    AlreadyFinalized(usize),

    #[error("attempted to mutate frozen parameters: {0}")]
    FrozenParameter(String),

    #[error("forward transfer requires a previous task")]
    NoPreviousTask,

    #[error("no finalized tasks available for inference")]
    NoFinalizedTasks,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("training diverged at task {task}, step {step}: loss = {loss}")]
    Diverged { task: usize, step: usize, loss: f64 },

    #[error("digest mismatch in {what}: expected {expected}, found {found}")]
    DigestMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("corrupt archive: {0}")]
    CorruptArchive(String),

    #[error("unsupported archive version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing checkpoint at {0}")]
    MissingCheckpoint(PathBuf),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot write output {path}")]
    OutputNotWritable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("render error: {0}")]
    Render(String),

    #[error("consistency check failed: {0}")]
    Assertion(String),
}

impl EftError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EftError::Io {
            path: path.into(),
            source,
        }
    }

    /// Re-labels an I/O failure that happened while writing `path`.
    pub(crate) fn into_output_error(self, path: &std::path::Path) -> Self {
        match self {
            EftError::Io { path, source } => EftError::OutputNotWritable { path, source },
            EftError::Csv(e) if e.is_io_error() => EftError::OutputNotWritable {
                path: path.to_path_buf(),
                source: std::io::Error::other(e.to_string()),
            },
            other => other,
        }
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        EftError::DimensionMismatch(msg.into())
    }
}
