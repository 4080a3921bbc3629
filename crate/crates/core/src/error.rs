use thiserror::Error;

/// Errors raised by the selection, sampling and inference routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("instrument matrix is rank deficient (rank {rank} < {cols})")]
    RankDeficient { rank: usize, cols: usize },

    #[error("degenerate TSLS denominator D'(P_Z - P_ZE)D = {value:e} (threshold {threshold:e}); the complement of E carries no usable instruments")]
    DegenerateDenominator { value: f64, threshold: f64 },

    #[error("every instrument was selected as invalid (|E| = L = {0})")]
    AllInvalid(usize),

    #[error("coordinate descent did not converge after {sweeps} sweeps (last change {last_change:e})")]
    NoConvergence { sweeps: usize, last_change: f64 },

    #[error("residual variance is not positive ({0:e}); summary statistics are inconsistent")]
    NegativeVariance(f64),

    #[error("chain stuck: block `{block}` accepted no proposals")]
    StuckChain { block: &'static str },

    #[error("importance weights degenerate at beta0 = {beta0} (max normalized weight {max_weight:.4})")]
    DegenerateWeights { beta0: f64, max_weight: f64 },

    #[error("could not bracket the pivot after {expansions} expansions (pivot at lower end {lower_pivot:.4}, upper end {upper_pivot:.4})")]
    BracketNotFound {
        expansions: usize,
        lower_pivot: f64,
        upper_pivot: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Coarse failure class, used by the CLI to pick an exit code.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidInput(_)
            | Error::RankDeficient { .. }
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => ErrorClass::Input,
            Error::DegenerateDenominator { .. }
            | Error::AllInvalid(_)
            | Error::NoConvergence { .. }
            | Error::NegativeVariance(_) => ErrorClass::Numerical,
            Error::StuckChain { .. }
            | Error::DegenerateWeights { .. }
            | Error::BracketNotFound { .. } => ErrorClass::Sampler,
        }
    }

    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "InvalidInput",
            Error::RankDeficient { .. } => "RankDeficient",
            Error::DegenerateDenominator { .. } => "DegenerateDenominator",
            Error::AllInvalid(_) => "AllInvalid",
            Error::NoConvergence { .. } => "NoConvergence",
            Error::NegativeVariance(_) => "NegativeVariance",
            Error::StuckChain { .. } => "StuckChain",
            Error::DegenerateWeights { .. } => "DegenerateWeights",
            Error::BracketNotFound { .. } => "BracketNotFound",
            Error::Io(_) => "Io",
            Error::Csv(_) => "Csv",
            Error::Json(_) => "Json",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Input,
    Numerical,
    Sampler,
}

pub type Result<T> = std::result::Result<T, Error>;
