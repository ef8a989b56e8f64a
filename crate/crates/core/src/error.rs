use std::path::PathBuf;

use thiserror::Error;

use crate::admm::AdmmSolution;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not antisymmetric (|M + M^T|_F = {residual:.3e})")]
    Asymmetry { residual: f64 },

    #[error("matrix is singular (smallest singular value {smallest:.3e})")]
    SingularInput { smallest: f64 },

    #[error("not a rotation matrix (|R^T R - I|_F = {orthogonality:.3e}, det = {det:.6})")]
    InvalidRotation { orthogonality: f64, det: f64 },

    #[error("camera centers coincide")]
    CoincidentCenters,

    #[error("block is not an essential matrix (singular values {singular_values:?})")]
    NotEssential { singular_values: [f64; 3] },

    #[error("essential matrix is degenerate (singular values {singular_values:?})")]
    DegenerateEssential { singular_values: [f64; 3] },

    #[error("the two pose pairs imply different rotations (|R_a - R_b|_F = {disagreement:.3e})")]
    InconsistentPair { disagreement: f64 },

    #[error("pose pair is degenerate: centers coincide within a pair")]
    CollinearDegenerate,

    #[error("view index {index} out of range for {n} views")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("block ({i}, {j}) is invalid: {reason}")]
    InvalidBlock { i: usize, j: usize, reason: String },

    #[error("block ({i}, {j}) is not observed")]
    MissingBlock { i: usize, j: usize },

    #[error("matrix is not fully observed ({observed} of {expected} blocks)")]
    IncompleteMatrix { observed: usize, expected: usize },

    #[error("matrix has rank below 6 (6th/1st singular value ratio {ratio:.3e}); centers may be collinear")]
    RankDeficient { ratio: f64 },

    #[error("nonzero eigenvalues are not distinct (smallest relative gap {gap:.3e})")]
    EigenvalueMultiplicity { gap: f64 },

    #[error("positive and negative eigenvalues are not paired (residual {residual:.3e})")]
    Pairing { residual: f64 },

    #[error("no sign configuration yields a block rotation matrix (best residual {best_residual:.3e})")]
    NoValidSign { best_residual: f64 },

    #[error("zero-length translation")]
    ZeroTranslation,

    #[error("viewing graph is disconnected")]
    DisconnectedGraph,

    #[error("triplet cover is empty: {reason}")]
    EmptyCover { reason: String },

    #[error("ADMM did not converge within {iterations} iterations")]
    NotConverged {
        iterations: usize,
        best: Box<AdmmSolution>,
    },

    #[error("triplets {first} and {second} disagree on the configuration of their shared cameras {shared:?}")]
    ConfigurationMismatch {
        first: usize,
        second: usize,
        shared: [usize; 2],
    },

    #[error("insufficient overlap with the reference: {reason}")]
    InsufficientOverlap { reason: String },

    #[error("could not sample a non-degenerate layout after {attempts} attempts")]
    LayoutDegenerate { attempts: usize },

    #[error("invalid scene specification: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping pipeline stage annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
