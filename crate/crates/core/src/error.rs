use thiserror::Error;

/// Errors raised anywhere in the analysis and optimization chain.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("region edge at {axis} = {coord} um is not aligned with the {size} um element grid")]
    MisalignedRegion { axis: char, coord: f64, size: f64 },

    #[error("singular matrix ({context}) at pivot {pivot}")]
    Singular { context: String, pivot: usize },

    #[error("internal resonance suspected: {context} has condition estimate {condition:.3e}")]
    InternalResonance { context: String, condition: f64 },

    #[error("eigensolver did not converge: residual {residual:.3e} after {iterations} iterations")]
    EigenNonConvergence { residual: f64, iterations: usize },

    #[error("reduced-order model breakdown: {0}")]
    RomBreakdown(String),

    #[error("degenerate saddle-node: {0}")]
    DegenerateSaddleNode(String),

    #[error("saddle-node point at cusp: {0}")]
    AtCusp(String),

    #[error("stale density pipeline cache")]
    StaleCache,

    #[error("MMA subproblem did not converge (KKT residual {0:.3e})")]
    MmaNonConvergence(f64),

    #[error("time integration failed: {0}")]
    Integration(String),

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
