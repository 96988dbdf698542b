use crate::lattice::CubeId;

/// Errors surfaced by lattice, measure and operator routines.
///
/// Verification failures (accretivity, well-localization, trace steps) are
/// *reports*, not errors; only structural misuse and numerical breakdown
/// land here.
#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    #[error("lattice mismatch: {0}")]
    LatticeMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("depth exceeded: generation {requested} past leaf generation {depth}")]
    DepthExceeded { requested: u32, depth: u32 },

    #[error("cube {0:?} is a leaf; the operation needs children")]
    LeafCube(CubeId),

    #[error("zero-norm input where a normalized ratio was requested")]
    ZeroNorm,

    #[error("power iteration did not converge; best lower bound {best}")]
    NormNonConvergence { best: f64 },

    #[error("generator exhausted after {attempts} rejected candidates")]
    GeneratorExhausted { attempts: u32 },

    #[error("global test function is inconsistent at leaf {leaf}: {detail}")]
    ConsistencyViolation { leaf: usize, detail: String },

    #[error("infeasible parameters: {0}")]
    InfeasibleParams(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("invalid data: {0}")]
    InvalidData(String),
}

pub type Result<T> = std::result::Result<T, Error>;
