//! Crate-wide error type.

use crate::nuisance::NuisanceKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    // Dataset validation.
    #[error("dataset has no target rows (source = 0)")]
    EmptyTarget,
    #[error("dataset has no study rows (source >= 1)")]
    EmptyStudies,
    #[error("study row {row} has no outcome")]
    MissingOutcome { row: usize },
    #[error("target row {row} carries an outcome")]
    OutcomeOnTarget { row: usize },
    #[error("non-finite covariate at row {row}, column {column}")]
    NonFiniteCovariate { row: usize, column: usize },
    #[error("row {row} has {found} covariates, expected {expected}")]
    CovariateLength { row: usize, expected: usize, found: usize },
    #[error("row {row} has a non-positive or non-finite weight")]
    InvalidWeight { row: usize },
    #[error("row {row} has a non-finite score")]
    NonFiniteScore { row: usize },
    #[error("row {row} is missing a score")]
    MissingScore { row: usize },
    #[error("psu/ssu labels must cover every target row when present")]
    MissingPsuLabels,

    // Nuisance fitting and prediction.
    #[error("logistic fit requires at least one row")]
    EmptyFit,
    #[error("logistic fit is separated (monotone likelihood)")]
    SeparatedFit,
    #[error("design matrix is rank deficient at column {column}")]
    RankDeficient { column: usize },
    #[error("prediction requested from a {found:?} fit, expected {expected:?}")]
    KindMismatch { expected: NuisanceKind, found: NuisanceKind },
    #[error("basis term references covariate {index} but the data has {dim}")]
    BasisOutOfRange { index: usize, dim: usize },

    // Estimators.
    #[error("estimator denominator is not positive ({context})")]
    ZeroDenominator { context: &'static str },
    #[error("scores are degenerate: fewer than two distinct values")]
    DegenerateScores,

    // Tilt sensitivity analysis.
    #[error(
        "target prevalence {target} is unattainable by tilting; achievable range [{lo}, {hi}]"
    )]
    BracketFailure { target: f64, lo: f64, hi: f64 },
    #[error("tilt diagnostic needs at least two studies, found {found}")]
    InsufficientStudies { found: usize },
    #[error("combination weights sum to {sum}, expected 1")]
    WeightSumViolation { sum: f64 },

    // Resampling.
    #[error("{failed} of {total} bootstrap replicates failed, over the 20% budget")]
    TooManyFailures { failed: usize, total: usize },
    #[error("bootstrap plan is invalid: {0}")]
    InvalidPlan(String),

    // Configuration and I/O (CLI surface).
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("column {0:?} not found in data header")]
    MissingColumn(String),
    #[error("invalid value {value:?} for column {column:?} at data row {row}")]
    InvalidField { row: usize, column: String, value: String },
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Stable short tag, used to aggregate failure reasons across bootstrap
    /// replicates and simulation runs.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::EmptyTarget => "empty_target",
            Error::EmptyStudies => "empty_studies",
            Error::MissingOutcome { .. } => "missing_outcome",
            Error::OutcomeOnTarget { .. } => "outcome_on_target",
            Error::NonFiniteCovariate { .. } => "non_finite_covariate",
            Error::CovariateLength { .. } => "covariate_length",
            Error::InvalidWeight { .. } => "invalid_weight",
            Error::NonFiniteScore { .. } => "non_finite_score",
            Error::MissingScore { .. } => "missing_score",
            Error::MissingPsuLabels => "missing_psu_labels",
            Error::EmptyFit => "empty_fit",
            Error::SeparatedFit => "separation",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::KindMismatch { .. } => "kind_mismatch",
            Error::BasisOutOfRange { .. } => "basis_out_of_range",
            Error::ZeroDenominator { .. } => "zero_denominator",
            Error::DegenerateScores => "degenerate_scores",
            Error::BracketFailure { .. } => "bracket_failure",
            Error::InsufficientStudies { .. } => "insufficient_studies",
            Error::WeightSumViolation { .. } => "weight_sum_violation",
            Error::TooManyFailures { .. } => "too_many_failures",
            Error::InvalidPlan(_) => "invalid_plan",
            Error::Config(_) => "config",
            Error::MissingColumn(_) => "missing_column",
            Error::InvalidField { .. } => "invalid_field",
            Error::Io(_) => "io",
        }
    }
}
