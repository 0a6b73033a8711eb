use thiserror::Error;

use crate::panel::ObsKey;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: column `{column}` not found")]
    MissingColumn { column: String },

    #[error("duplicate observation key {0}")]
    DuplicateKey(ObsKey),

    #[error("market {market} period {period}: total quantity {total} exceeds market size {size}")]
    Consistency {
        market: String,
        period: i64,
        total: f64,
        size: f64,
    },

    #[error("market {market}: conflicting market sizes {first} and {second}")]
    MarketSizeConflict {
        market: String,
        first: f64,
        second: f64,
    },

    #[error("alternative {alt} is assigned to more than one nest ({first}, {second})")]
    NestConflict {
        alt: String,
        first: String,
        second: String,
    },

    #[error("invalid observation {key}: {reason}")]
    InvalidObservation { key: ObsKey, reason: String },

    #[error("market {market} period {period}: outside share {outside} is not positive")]
    OutsideShare {
        market: String,
        period: i64,
        outside: f64,
    },

    #[error("formula error: {0}")]
    Formula(String),

    #[error("design matrix is rank deficient; dependent columns: {columns:?}")]
    RankDeficient { columns: Vec<String> },

    #[error("instrument matrix is singular; collinear instruments: {columns:?}")]
    CollinearInstruments { columns: Vec<String> },

    #[error("under-identified: {instruments} excluded instruments for {endogenous} endogenous regressors")]
    Identification {
        instruments: usize,
        endogenous: usize,
    },

    #[error("fixed-effect absorption did not converge after {iterations} sweeps (max group mean {residual:e})")]
    AbsorptionNonConvergence { iterations: usize, residual: f64 },

    #[error("{solver} did not converge after {iterations} iterations (last value {last:e})")]
    NonConvergence {
        solver: &'static str,
        iterations: usize,
        last: f64,
    },

    #[error("share inversion: non-finite value in market {market} period {period}")]
    NonFinite { market: String, period: i64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("sample misalignment: {0}")]
    Misalignment(String),

    #[error("holdout split: {0}")]
    Split(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn formula(msg: impl Into<String>) -> Self {
        Error::Formula(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
