//! Crate-wide error type.
//!
//! Every variant maps to a stable short code via [`Error::code`]; the CLI
//! prints `error[<CODE>]: <message>` on a single line.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("unknown edge {0}")]
    UnknownEdge(usize),
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("coordinate ({x}, {y}) is outside the grid extent")]
    OutOfExtent { x: f64, y: f64 },
    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("no candidate edge within {radius} m of point {index}")]
    NoCandidates { index: usize, radius: f64 },
    #[error("invalid keep ratio {0}; expected 0 < ratio <= 1")]
    InvalidRatio(f64),
    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),
    #[error("too few trajectories: {have} for {clients} clients")]
    TooFewTrajectories { have: usize, clients: usize },
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("index {index} out of range for {len} classes")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("backward called without a recorded forward pass")]
    UnrecordedGraph,
    #[error("vocabulary overflow: {0}")]
    VocabularyOverflow(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("accuracy {0} outside [0, 1]")]
    AccuracyOutOfRange(f64),
    #[error("negative distillation weight {0}")]
    NegativeLambda(f64),
    #[error("empty set: {0}")]
    EmptySet(String),
    #[error("client {client}: {source}")]
    Client {
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable code for this error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidDimension(_) => "E_DIMENSION",
            Error::UnknownEdge(_) => "E_UNKNOWN_EDGE",
            Error::UnknownNode(_) => "E_UNKNOWN_NODE",
            Error::OutOfExtent { .. } => "E_OUT_OF_EXTENT",
            Error::InvalidNetwork(_) => "E_NETWORK",
            Error::NoCandidates { .. } => "E_NO_CANDIDATES",
            Error::InvalidRatio(_) => "E_RATIO",
            Error::InvalidRatios(_) => "E_RATIOS",
            Error::TooFewTrajectories { .. } => "E_TOO_FEW",
            Error::InvalidTrajectory(_) => "E_TRAJECTORY",
            Error::MalformedRow { .. } => "E_MALFORMED_ROW",
            Error::ShapeMismatch(_) => "E_SHAPE",
            Error::LengthMismatch { .. } => "E_LENGTH",
            Error::IndexOutOfRange { .. } => "E_INDEX",
            Error::LayoutMismatch(_) => "E_LAYOUT",
            Error::NonFiniteGradient => "E_NONFINITE",
            Error::UnrecordedGraph => "E_UNRECORDED",
            Error::VocabularyOverflow(_) => "E_VOCAB",
            Error::Checkpoint(_) => "E_CHECKPOINT",
            Error::InvalidConfig(_) => "E_CONFIG",
            Error::AccuracyOutOfRange(_) => "E_ACCURACY",
            Error::NegativeLambda(_) => "E_LAMBDA",
            Error::EmptySet(_) => "E_EMPTY",
            Error::Client { source, .. } => source.code(),
            Error::MissingFile(_) => "E_MISSING_FILE",
            Error::Io(_) => "E_IO",
            Error::Json(_) => "E_JSON",
            Error::Csv(_) => "E_CSV",
        }
    }
}
