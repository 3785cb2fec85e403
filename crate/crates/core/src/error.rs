//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong between reading a CSV and reporting an
/// estimate. Validation problems (data, schema, layout) are distinguished
/// from numerical fitting failures so the CLI can map them to exit codes.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: column `{column}` has non-numeric value `{value}`")]
    NonNumericValue {
        row: usize,
        column: String,
        value: String,
    },
    #[error("cluster `{cluster}`, period {period}: treatment indicator is not constant within the cell")]
    MixedTreatmentWithinCell { cluster: String, period: usize },
    #[error("cluster `{0}`: treatment switches off after adoption (not monotone)")]
    MonotonicityViolation(String),
    #[error("period {period}: treated proportion e_j = {propensity} leaves no overlap between arms")]
    NoRolloutPeriod { period: usize, propensity: f64 },
    #[error("some clusters are already treated in the baseline period")]
    BaselineTreated,
    #[error("cluster `{0}` is never treated, so the final period is not fully rolled out")]
    FinalPeriodUntreated(String),
    #[error("cluster `{cluster}`, period {period}: cell is empty but carries nonzero weight")]
    EmptyCell { cluster: String, period: usize },
    #[error("cluster `{0}`: zero observations across all periods")]
    ZeroClusterTotal(String),
    #[error("period {period}: no observed cluster in arm z={arm}")]
    EmptyArmInPeriod { period: usize, arm: u8 },
    #[error("{0}")]
    ScaleDomain(String),
    #[error("design matrix is rank deficient ({0})")]
    RankDeficientDesign(String),
    #[error("optimizer did not converge within {max_iter} iterations (last gradient norm {grad_norm:.3e})")]
    OptimizerNonConvergence { max_iter: usize, grad_norm: f64 },
    #[error("IRLS did not converge within {0} iterations")]
    IrlsNonConvergence(usize),
    #[error("fitted probabilities are numerically separated for arm z={arm} in period {period}")]
    SeparationDetected { arm: u8, period: usize },
    #[error("inner Newton iteration diverged for cluster `{0}`")]
    InnerNewtonDivergence(String),
    #[error("no prediction available for cluster `{cluster}` in period {period}")]
    PredictionMissing { cluster: String, period: usize },
    #[error("period {0} is outside the rollout range 2..=J-1")]
    PeriodOutOfRange(usize),
    #[error("model has not been fitted")]
    UnfittedModel,
    #[error("leaving out cluster `{cluster}` empties arm z={arm} in period {period}")]
    LocoDegenerate {
        cluster: String,
        period: usize,
        arm: u8,
    },
    #[error("contrast covariance is numerically singular (condition number {0:.3e})")]
    SingularContrastCovariance(f64),
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("csv error: {0}")]
    Csv(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}

impl Error {
    /// True for data/schema/layout problems, as opposed to numerical
    /// failures during model fitting.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::OptimizerNonConvergence { .. }
                | Error::IrlsNonConvergence(_)
                | Error::SeparationDetected { .. }
                | Error::InnerNewtonDivergence(_)
                | Error::SingularContrastCovariance(_)
        )
    }
}
