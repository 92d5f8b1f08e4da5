//! Crate-wide error type.

use crate::grid::MultiIndex;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("point outside kernel domain: {0}")]
    Domain(String),

    #[error(
        "derivative of order {requested} unavailable for kernel '{kernel}' \
         (analytic derivatives provided up to order {available})"
    )]
    UnsupportedDerivative {
        kernel: String,
        requested: usize,
        available: usize,
    },

    #[error("kernel not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error(
        "margin too small for stencil of order {alpha:?}: needs {needed}, grid margin is {margin}"
    )]
    MarginTooSmall {
        alpha: MultiIndex,
        needed: f64,
        margin: f64,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
