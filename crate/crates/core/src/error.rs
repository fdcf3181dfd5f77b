use thiserror::Error;

use crate::lattice::Site;

/// Errors raised by the simulation and verification routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DgffError {
    #[error("n must be ≥ 2 (got {0})")]
    BoxTooSmall(usize),

    #[error("site ({}, {}) is not an interior site of the box", .0.0, .0.1)]
    NotInterior(Site),

    #[error("eigen index ({0}, {1}) out of range for n = {2}")]
    EigenIndexOutOfRange(usize, usize, usize),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("time {time} exceeds the schedule horizon {horizon}")]
    BeyondHorizon { time: f64, horizon: f64 },

    #[error("field does not match the box: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dense Green's matrix requested for n = {0}; dense storage is limited to n ≤ {max}", max = crate::spectral::DENSE_GREENS_MAX_N)]
    TooLargeForDense(usize),

    #[error("internal numerical failure: {0}")]
    Numerical(String),

    #[error("the propagator bundle was built without the {0}")]
    MissingData(&'static str),
}

pub type Result<T> = std::result::Result<T, DgffError>;
