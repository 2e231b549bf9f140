use thiserror::Error;

/// Errors produced by model construction, the spectral/moment algebra, the
/// root solver, and the statistical tests.
#[derive(Error, Debug)]
pub enum AteError {
    #[error("rank-deficient connectivity")]
    RankDeficientConnectivity,

    #[error("invalid probability: mean entry {value} at ({row}, {col}) outside [0, 1]")]
    InvalidProbability { value: f64, row: usize, col: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("input vector must have unit norm (got {norm})")]
    NonUnitVector { norm: f64 },

    #[error("moment order {l} beyond truncation order {l_max}")]
    BeyondTruncationOrder { l: usize, l_max: usize },

    #[error("evaluation point t = 0 is outside the domain")]
    ZeroEvaluationPoint,

    #[error("resonant deflation: bracket matrix is singular or ill-conditioned (cond ~ {cond:.3e})")]
    ResonantDeflation { cond: f64 },

    #[error("flat objective: derivative of the deflated resolvent vanished at t = {t}")]
    FlatObjective { t: f64 },

    #[error("no root bracketed (spike too weak?): f({a:.6}) = {fa:.3e}, f({b:.6}) = {fb:.3e}")]
    NoRootBracketed { a: f64, b: f64, fa: f64, fb: f64 },

    #[error("search interval for spike {k} overlaps the interval of spike {other}; lower c0")]
    IntervalOverlap { k: usize, other: usize },

    #[error("degenerate denominator: variance {value:.3e} is not positive")]
    DegenerateDenominator { value: f64 },

    #[error("degenerate graph: estimated density {p_hat} leaves no noise")]
    DegenerateGraph { p_hat: f64 },

    #[error("zero residual diagonal: rank statistic undefined")]
    ZeroResidualDiagonal,

    #[error("homogeneous-exact variance requested on a heterogeneous profile")]
    HeterogeneousProfile,

    #[error("noise family carries moments only and cannot be sampled")]
    SamplerUnavailable,

    #[error("need at least {min} finite samples, got {got}")]
    TooFewSamples { min: usize, got: usize },

    #[error("samples contain non-finite values")]
    NonFiniteSamples,

    #[error("spike index {k} out of range 1..={k_max}")]
    SpikeIndexOutOfRange { k: usize, k_max: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AteError>;
