use thiserror::Error;

use crate::vreml::FitReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Which precision parameter a degeneracy refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Response,
    Spatial,
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::Response => f.write_str("tau_y (response precision)"),
            Precision::Spatial => f.write_str("tau_u (spatial precision)"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("graph with {n} nodes has no edges; the Laplacian is identically zero")]
    NoEdges { n: usize },
    #[error("edge ({i}, {j}) is a self-loop")]
    SelfLoop { i: usize, j: usize },
    #[error("node index {index} out of range for a graph with {n} nodes")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("lattice side must be at least 2, got {0}")]
    LatticeTooSmall(usize),
    #[error(
        "adjacency graph has {components} connected components (A-2 requires a connected graph)"
    )]
    Disconnected { components: usize },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFiniteInput(&'static str),
    #[error(
        "design matrix is rank deficient: smallest singular value {smallest:.3e} vs largest {largest:.3e} (A-1 requires full column rank)"
    )]
    RankDeficientDesign { smallest: f64, largest: f64 },
    #[error("design has p = {p} columns for n = {n} observations; p must be below n/2 (A-1)")]
    DesignTooWide { n: usize, p: usize },
    #[error("sum-to-zero basis requires n >= 2, got {0}")]
    BasisTooSmall(usize),
    #[error("operator is not positive definite on the sum-to-zero subspace (A-3 violated)")]
    NotPositiveDefiniteOnE,
    #[error("degenerate update for {component}: {detail}")]
    DegenerateDenominator {
        component: Precision,
        detail: String,
    },
    #[error("coordinate ascent did not converge in {} sweeps", report.sweeps)]
    NotConverged { report: Box<FitReport> },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dense path limited to n <= {limit}, got n = {n}")]
    SizeGuard { n: usize, limit: usize },
    #[error("objective is non-finite on the entire search grid")]
    NonFiniteObjective,

    #[error("too few non-empty grid cells: {0} (need at least 2)")]
    TooFewCells(usize),
    #[error(
        "grid adjacency is disconnected: {} components, largest has {} of {} cells",
        sizes.len(),
        sizes.iter().max().unwrap_or(&0),
        sizes.iter().sum::<usize>()
    )]
    DisconnectedGrid { sizes: Vec<usize> },
    #[error("response has zero variance across grid cells; cannot standardize")]
    ZeroVarianceResponse,

    #[error("parse error: {0}")]
    Parse(String),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
