use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {what}: {detail}")]
    NonFinite { what: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("barrier gradient is singular: distance {distance:.3e} m to obstacle center")]
    SingularBarrier { distance: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("hessian is not positive semidefinite (min pivot {min_pivot:.3e})")]
    NotPsd { min_pivot: f64 },

    #[error("KKT system is singular for the current working set")]
    SingularKkt,

    #[error("active-set iteration limit reached ({0} iterations)")]
    IterationLimit(usize),

    #[error("robustness metric requested on an infeasible trajectory")]
    InfeasibleRecord,

    #[error("dataset contains a single class; need both +1 and -1 labels")]
    SingleClass,

    #[error("tuner start point is not rollout-feasible")]
    InfeasibleStart,

    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn non_finite(what: &'static str, detail: impl std::fmt::Debug) -> Self {
        Error::NonFinite {
            what,
            detail: format!("{detail:?}"),
        }
    }
}
