use crate::expr::ExprError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Expr(#[from] ExprError),

    #[error("matrix is not irreducible")]
    NotIrreducible,
    #[error("no convergence after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("vector is zero")]
    ZeroVector,
    #[error("vector has a non-positive entry at index {index}")]
    NonPositiveVector { index: usize },
    #[error("matrix entry ({row}, {col}) is negative or not finite")]
    NegativeEntry { row: usize, col: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("diffusion degenerate at node {node}: min eigenvalue {min_eig:e} below {eps_a:e}")]
    DegenerateDiffusion { node: usize, min_eig: f64, eps_a: f64 },
    #[error("cross-diffusion at node {node} is not diagonally dominant; stencil would lose monotonicity")]
    NonMonotoneStencil { node: usize },
    #[error("coefficient {what} is not finite at node {node}, control {control}")]
    NonFiniteCoefficient { what: &'static str, node: usize, control: usize },
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("length mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("time step {dt:e} exceeds CFL bound {dt_max:e}")]
    CflViolation { dt: f64, dt_max: f64 },
    #[error("invalid options: {0}")]
    InvalidOptions(String),

    #[error("reference function is not strictly positive at node {node}")]
    NonPositiveReference { node: usize },
    #[error("iterate lost strict positivity at iteration {iteration}")]
    NonPositiveIterate { iteration: usize },
    #[error("function is not strictly positive at node {node}")]
    NonPositiveFunction { node: usize },
    #[error("eigenfunction is not strictly positive at node {node}")]
    NonPositivePhi { node: usize },
    #[error("need at least {need} points, have {have}")]
    InsufficientData { have: usize, need: usize },
    #[error("orbit spread already zero at record {index}")]
    NonPositiveEta { index: usize },

    #[error("policy iteration cycles between two policies")]
    CycleDetected { first: Vec<usize>, second: Vec<usize> },

    #[error("path {path} left the finite range at step {step}")]
    NonFiniteState { path: usize, step: usize },
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Expr(e) => e.kind(),
            Error::NotIrreducible => "NotIrreducible",
            Error::NoConvergence { .. } => "NoConvergence",
            Error::ZeroVector => "ZeroVector",
            Error::NonPositiveVector { .. } => "NonPositiveVector",
            Error::NegativeEntry { .. } => "NegativeEntry",
            Error::InvalidGrid(_) => "InvalidGrid",
            Error::InvalidProblem(_) => "InvalidProblem",
            Error::DegenerateDiffusion { .. } => "DegenerateDiffusion",
            Error::NonMonotoneStencil { .. } => "NonMonotoneStencil",
            Error::NonFiniteCoefficient { .. } => "NonFiniteCoefficient",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::CflViolation { .. } => "CflViolation",
            Error::InvalidOptions(_) => "InvalidOptions",
            Error::NonPositiveReference { .. } => "NonPositiveReference",
            Error::NonPositiveIterate { .. } => "NonPositiveIterate",
            Error::NonPositiveFunction { .. } => "NonPositiveFunction",
            Error::NonPositivePhi { .. } => "NonPositivePhi",
            Error::InsufficientData { .. } => "InsufficientData",
            Error::NonPositiveEta { .. } => "NonPositiveEta",
            Error::CycleDetected { .. } => "CycleDetected",
            Error::NonFiniteState { .. } => "NonFiniteState",
        }
    }

    /// True for failures of a numerical procedure (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence { .. }
                | Error::NonPositiveIterate { .. }
                | Error::CycleDetected { .. }
                | Error::NonFiniteState { .. }
                | Error::InsufficientData { .. }
                | Error::NonPositiveEta { .. }
                | Error::Expr(ExprError::Eval { .. })
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
