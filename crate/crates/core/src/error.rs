use std::path::PathBuf;

use hseg_tensor::TensorError;
use thiserror::Error;

use crate::hierarchy::LabelId;

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown node `{name}`{}", suggest(suggestions))]
    UnknownNode { name: String, suggestions: Vec<String> },
    #[error("dataset `{dataset}` binds label {label} to both `{first}` and `{second}`")]
    ConflictingBinding {
        dataset: String,
        label: LabelId,
        first: String,
        second: String,
    },
    #[error("hierarchy failed validation:\n{0}")]
    Invalid(String),
    #[error("requested level {requested} but the hierarchy is {depth} levels deep")]
    LevelTooDeep { requested: usize, depth: usize },
}

fn suggest(s: &[String]) -> String {
    if s.is_empty() {
        String::new()
    } else {
        format!("; did you mean {}?", s.iter().map(|x| format!("`{x}`")).collect::<Vec<_>>().join(" or "))
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset spec `{dataset}`: {reason}")]
    Spec { dataset: String, reason: String },
    #[error("dataset `{0}` has no samples")]
    EmptyDataset(String),
    #[error("{0}")]
    Geometry(String),
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("label {label} outside a {size}x{size} confusion matrix")]
    LabelOutOfRange { label: usize, size: usize },
    #[error("maps differ in size: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("class filter selects no classes")]
    EmptyFilter,
    #[error("class {0} is not part of the flat label space")]
    UnknownClass(usize),
}

/// Top-level error for operations spanning several modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| Error::Io {
            context: what(),
            source,
        })
    }
}
