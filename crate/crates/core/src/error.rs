//! Crate-wide error type and the exit-code table used by the `wsi` binary.

use thiserror::Error;

/// Per-sample estimator failure. Kept separate from [`Error`] because
/// Monte Carlo loops produce one of these per repetition and only need a
/// lightweight, copyable tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum EstimateError {
    /// The Carré radicand went negative: the input is non-physical or
    /// noise-dominated.
    #[error("negative radicand in Carré demodulation")]
    NegativeRadicand,
    /// All pairwise differences vanished (for example zero visibility),
    /// leaving the Carré quotient 0/0.
    #[error("degenerate input to Carré demodulation")]
    DegenerateInput,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("OPL decomposition would be negative: total {total} < reference {reference}")]
    InvalidDecomposition { total: f64, reference: f64 },

    #[error(transparent)]
    Estimate(#[from] EstimateError),

    #[error("model intensity is zero in band {band}; Fisher information undefined")]
    SingularModel { band: usize },

    #[error("Fisher information matrix is singular ({context})")]
    SingularInformation { context: String },

    #[error("{failed} of {reps} repetitions failed; estimate meaningless")]
    TooManyFailures { failed: usize, reps: usize },

    #[error("OPL window of width {width_um} um exceeds the ambiguity limit {limit_um} um")]
    WindowTooWide { width_um: f64, limit_um: f64 },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    DivergedTraining { epoch: usize },

    #[error("OPL estimate {estimate_um} um lies outside the bank span [{lo_um}, {hi_um}] um")]
    OutOfSpan {
        estimate_um: f64,
        lo_um: f64,
        hi_um: f64,
    },

    #[error("sensitivity curves are not on matching grids: {0}")]
    MismatchedGrids(String),

    #[error("pixel ({x}, {y}) can saturate: alpha*(1+V) = {peak} ADU exceeds {adu_max} ADU")]
    SaturationRisk {
        x: usize,
        y: usize,
        peak: f64,
        adu_max: u16,
    },

    #[error("interferogram stack contains no frames")]
    EmptyStack,

    #[error("all pixels are masked; no values to aggregate")]
    AllMasked,

    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),

    #[error("format error in {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("config file not found: {path}")]
    ConfigNotFound { path: String },

    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code for the `wsi` binary. Documented in the README;
    /// every error class maps to a stable nonzero code.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigNotFound { .. } => 2,
            Error::ConfigInvalid(_) => 3,
            Error::Io(_) => 4,
            Error::Format { .. } => 5,
            Error::DivergedTraining { .. } => 6,
            Error::TooManyFailures { .. }
            | Error::EmptyStack
            | Error::AllMasked
            | Error::MismatchedGrids(_)
            | Error::OutOfSpan { .. } => 7,
            Error::InvalidParameter(_)
            | Error::InvalidDecomposition { .. }
            | Error::Estimate(_)
            | Error::SingularModel { .. }
            | Error::SingularInformation { .. }
            | Error::WindowTooWide { .. }
            | Error::SaturationRisk { .. }
            | Error::NonPositiveSigma(_) => 8,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
