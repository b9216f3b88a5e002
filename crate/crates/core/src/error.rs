use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate target covariance (condition number {cond:.3e})")]
    DegenerateTargetCovariance { cond: f64 },

    #[error("matrix is singular or rank deficient: {0}")]
    RankDeficient(String),

    #[error("solver did not converge after {sweeps} sweeps (gap {gap:.3e})")]
    SolverDidNotConverge { sweeps: usize, gap: f64 },

    #[error("solver failed on cross-validation cell (lambda index {lambda_index}, fold {fold}): {message}")]
    CvCellFailed {
        lambda_index: usize,
        fold: usize,
        message: String,
    },

    #[error("truncation region is empty: observed point violates the selection event")]
    EmptyRegion,

    #[error("region probability underflows (< 1e-300)")]
    RegionUnderflow,

    #[error("no interior starting point: Chebyshev-center LP infeasible")]
    InfeasibleStart,

    #[error("observed statistic violates the selection event (covariance/plumbing bug indicator)")]
    ObservedOutsideEvent,

    #[error("non-finite gradient at sampler state {state:?}")]
    NonFiniteGradient { state: Vec<f64> },

    #[error("degenerate chain: all kept draws identical")]
    DegenerateChain,

    #[error(
        "effective sample size collapsed under tilt ({ess:.1} of {draws} draws); \
         re-sample at a reference closer to the requested parameter"
    )]
    EssCollapse { ess: f64, draws: usize },

    #[error("two-part randomization draws missing from curve")]
    MissingTwoPartDraws,

    #[error("correlated randomization coordinates: cube marginalization requires i.i.d. components")]
    CorrelatedRandomization,

    #[error("selection trace missing: carving requires the training-split selection record")]
    MissingSelectionTrace,

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
