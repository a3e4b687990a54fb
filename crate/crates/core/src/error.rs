use thiserror::Error;

use crate::exprlang::{EvalError, ParseError};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("evaluating {kernel}: {source}")]
    Eval {
        kernel: &'static str,
        #[source]
        source: EvalError,
    },

    #[error("{kernel} = {value} exceeds the declared bound C = {bound}")]
    BoundViolation {
        kernel: &'static str,
        value: f64,
        bound: f64,
    },

    #[error("{kernel} evaluated to {value}, rates must be finite and non-negative")]
    InvalidRate { kernel: &'static str, value: f64 },

    #[error("relative fitness undefined: c(r,x,y) = {c_xy}, c(r,y,x) = {c_yx}")]
    FitnessDomain { c_xy: f64, c_yx: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{0}")]
    Precondition(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
