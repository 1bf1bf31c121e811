use thiserror::Error;

use crate::forest::ModelIndex;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty ensemble")]
    EmptyEnsemble,
    #[error("degenerate ensemble: {members} member(s), at least 2 required")]
    DegenerateEnsemble { members: usize },
    #[error("unpaired ensembles: {left} vs {right} members")]
    UnpairedEnsembles { left: usize, right: usize },
    #[error("deflation not permitted: alpha = {0}")]
    Deflation(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("rank-deficient surrogate covariance (condition estimate {condition:.3e})")]
    RankDeficient { condition: f64 },
    #[error("singular linear system (condition estimate {condition:.3e})")]
    SingularSystem { condition: f64 },
    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("forest validation failed at {node}: {reason}")]
    Validation { node: String, reason: String },
    #[error("model propagation failed at node {node}, member {member}: {reason}")]
    ModelFailure {
        node: ModelIndex,
        member: usize,
        reason: String,
    },
    #[error("missing transfer operator tau({0},{1})")]
    MissingTransfer(usize, usize),
    #[error("missing covariance block ({0},{1})")]
    MissingBlock(usize, usize),
    #[error("integration diverged: {0}")]
    Diverged(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("malformed container: {0}")]
    Format(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
