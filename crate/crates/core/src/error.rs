use std::fmt;

use crate::direct::AreaId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage that produced an error. Used to tag messages from
/// `run_pipeline` so the user knows where things went wrong.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    Direct,
    Gvf,
    Fit,
    Predict,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Ingest => "ingest",
            Stage::Direct => "direct",
            Stage::Gvf => "gvf",
            Stage::Fit => "fit",
            Stage::Predict => "predict",
            Stage::Output => "output",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("no sampled units in area")]
    EmptyArea,
    #[error("invalid weight {0}")]
    InvalidWeight(f64),
    #[error("invalid prevalence {0}")]
    InvalidPrevalence(f64),
    #[error("invalid sample size {0}")]
    InvalidSampleSize(usize),
    #[error("area {area}: {source}")]
    InArea { area: AreaId, source: Box<Error> },

    #[error("collinear GVF covariates")]
    CollinearGvf,
    #[error("delta too small: log of nonpositive value {0}")]
    DeltaTooSmall(f64),
    #[error("invalid GVF design: {0}")]
    InvalidDesign(String),

    #[error("collinear covariates")]
    CollinearCovariates,
    #[error("too few areas: need at least {need}, got {got}")]
    TooFewAreas { need: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid error variance {0} (must be positive)")]
    InvalidErrorVariance(f64),
    #[error("REML did not converge after {0} iterations")]
    NotConverged(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("{0}")]
    Validation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model file: {0}")]
    Model(String),
    #[error("{stage}: {source}")]
    Stage { stage: Stage, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn in_area(self, area: &AreaId) -> Error {
        Error::InArea {
            area: area.clone(),
            source: Box::new(self),
        }
    }

    pub fn at(self, stage: Stage) -> Error {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, with stage and area annotations stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::InArea { source, .. } | Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    /// Whether this is a numerical failure (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(self.root(), Error::NotConverged(_))
    }
}
