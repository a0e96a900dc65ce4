use std::path::PathBuf;

use thiserror::Error;

use crate::model::Stage;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid ontology: {0}")]
    InvalidOntology(String),
    #[error("invalid marker catalog: {0}")]
    InvalidCatalog(String),
    #[error("unknown cell type `{0}`")]
    UnknownCellType(String),
    #[error("cell type `{cell_type}` has only {available} distinct markers (including ancestors), need {required}")]
    InsufficientMarkers {
        cell_type: String,
        available: usize,
        required: usize,
    },
    #[error("unknown gene `{0}`")]
    UnknownGene(String),
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("cell expresses no genes")]
    AllZeroExpression,
    #[error("mask rate {0} is outside [0, 1]")]
    RateOutOfRange(f64),
    #[error("sequence already carries masked positions")]
    AlreadyMasked,
    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("sequence has no non-padding tokens")]
    EmptySequence,
    #[error("adapters are already attached")]
    AdaptersAlreadyAttached,
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("no prototype embedding for cell type index {0}")]
    MissingPrototype(usize),
    #[error("masked-position set is empty")]
    EmptyMaskSet,
    #[error("non-finite loss component `{0}`")]
    NonFiniteInput(&'static str),
    #[error("dataset has no cells in the requested split")]
    EmptyDataset,
    #[error("incompatible task: {0}")]
    IncompatibleTask(String),
    #[error("stage order violation: {found:?} checkpoint cannot feed {requested}")]
    StageOrderViolation { found: Option<Stage>, requested: String },
    #[error("k = {k} is outside 1..={classes}")]
    KOutOfRange { k: usize, classes: usize },
    #[error("label {label} is outside 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("constant vector makes Pearson correlation undefined")]
    DegenerateVector,
    #[error("no evaluable cells: all {0} cells had constant masked ground truth")]
    DegenerateCell(usize),
    #[error("evaluation group `{0}` has constant true or predicted change")]
    DegenerateGroup(String),
    #[error("target label `{0}` is not in the source label space")]
    LabelSpaceMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("need at least 3 tail categories, have {0}")]
    TooFewCategories(usize),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error("malformed data file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors the command line reports as usage/config problems (exit code 2)
    /// rather than runtime failures.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::InvalidConfig(_))
    }
}
