use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op} requires a square matrix, got {rows}x{cols}")]
    NotSquare {
        op: &'static str,
        rows: usize,
        cols: usize,
    },

    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("jacobi eigensolver did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("node {node} has degree {degree}, above max_degree {max_degree}")]
    DegreeOverflow {
        node: usize,
        degree: usize,
        max_degree: usize,
    },

    #[error("infeasible generator request: {0}")]
    Infeasible(String),

    #[error("missing dataset file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("fold construction: {0}")]
    Folds(String),

    #[error("invalid normalization spec: {0}")]
    InvalidNorm(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("NaN detected in activations of layer {layer}")]
    NanActivation { layer: usize },

    #[error("stale forward cache: {0}")]
    StaleCache(String),

    #[error("training diverged at iteration {iteration} (loss {loss})")]
    Diverged { iteration: usize, loss: f64 },

    #[error("norm layer {0} does not exist or has no normalization")]
    NoNormLayer(usize),

    #[error("resampling exceeded {0} attempts")]
    ResampleLimit(usize),

    #[error("unknown config key '{key}'; allowed keys: {allowed}")]
    UnknownKey { key: String, allowed: String },

    #[error("bad value '{value}' for config key '{key}'; allowed: {allowed}")]
    BadValue {
        key: String,
        value: String,
        allowed: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag used by the CLI on stderr.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } | Error::NotSquare { .. } | Error::NonFinite { .. } => {
                "linalg"
            }
            Error::NoConvergence { .. } => "convergence",
            Error::InvalidGraph(_) | Error::DegreeOverflow { .. } | Error::Infeasible(_) => "graph",
            Error::MissingFile(_) | Error::Parse { .. } => "dataset",
            Error::Folds(_) => "folds",
            Error::InvalidNorm(_) => "norm",
            Error::InvalidModel(_) | Error::NanActivation { .. } | Error::StaleCache(_) => "model",
            Error::Diverged { .. } => "diverged",
            Error::NoNormLayer(_) => "probe",
            Error::ResampleLimit(_) => "testbed",
            Error::UnknownKey { .. } | Error::BadValue { .. } => "config",
            Error::Io(_) | Error::Csv(_) => "io",
        }
    }
}
