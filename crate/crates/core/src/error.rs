use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid schedule parameters: {0}")]
    InvalidScheduleParams(String),
    #[error("time {t} outside schedule range [{t_min}, {t_max}]")]
    TimeOutOfRange { t: f64, t_min: f64, t_max: f64 },
    #[error("basis of subspace {subspace} is not orthonormal (max deviation {deviation:e})")]
    NonOrthonormalBasis { subspace: usize, deviation: f64 },
    #[error("mixture weights of subspace {subspace} sum to {sum}, expected 1")]
    WeightsNotNormalized { subspace: usize, sum: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("noise level gamma must be positive, got {0}")]
    SingularNoise(f64),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("parameter grid is empty")]
    GridEmpty,
    #[error("component factor has {0} columns, expected rank one")]
    RankNotOne(usize),
    #[error("operation needs at least two mixture components")]
    SingleComponent,
    #[error("strong-convexity constant must be positive, got {0}")]
    NonPositiveAlpha(f64),
    #[error("smoothness constant {l_prime} is smaller than alpha {alpha}")]
    LSmallerThanAlpha { alpha: f64, l_prime: f64 },
    #[error("divergence detected at iteration {iteration}: distance {dist:e} exceeds 10x initial {initial:e}")]
    DivergenceDetected { iteration: usize, dist: f64, initial: f64 },
    #[error("non-finite value detected at sampler step {step}")]
    NaNDetected { step: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    /// Numerical failures map to a distinct CLI exit status from validation errors.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DivergenceDetected { .. } | Error::NaNDetected { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
