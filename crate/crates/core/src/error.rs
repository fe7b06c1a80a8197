//! Error type shared by every module of the crate.

use thiserror::Error;

use crate::env_model::Regime;

/// Errors raised by distribution construction, propagation, simulation,
/// bound evaluation and the experiment harness.
#[derive(Debug, Error)]
pub enum MfcError {
    #[error("state or action index {index} out of range 0..{bound}")]
    InvalidState { index: usize, bound: usize },

    #[error("class {class}: expected {expected} agents, found {found}")]
    PopulationMismatch {
        class: usize,
        expected: usize,
        found: usize,
    },

    #[error("class {class}: mass {found} differs from class weight {expected}")]
    ThetaIncompatible { class: usize, expected: f64, found: f64 },

    #[error("shape error: {0}")]
    ShapeError(String),

    #[error("distribution does not sum to one (sum = {sum})")]
    NotNormalized { sum: f64 },

    #[error("negative probability {value} at index {index}")]
    NegativeEntry { index: usize, value: f64 },

    #[error("invalid class weights: {0}")]
    InvalidWeights(String),

    #[error("regime mismatch: expected {expected:?}, found {found:?}")]
    RegimeError { expected: Regime, found: Regime },

    #[error("discount factor {0} outside [0, 1)")]
    InvalidDiscount(f64),

    #[error("log-probability underflow at class {class}, state {state}, action {action}")]
    ScoreUnderflow { class: usize, state: usize, action: usize },

    #[error("no closed-form constant: {0}")]
    NoClosedForm(String),

    #[error("bound invalid: gamma * S_P = {product} is not below one")]
    BoundInvalid { product: f64 },

    #[error("initial distribution differs from the empirical distribution of the agents (L1 = {distance})")]
    InitMismatch { distance: f64 },

    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    #[error("inner loop diverged at outer iteration {outer}, inner step {inner} (|w| = {norm})")]
    DivergedInnerLoop { outer: usize, inner: usize, norm: f64 },

    #[error("horizon cap of {cap} steps reached")]
    HorizonCapHit { cap: usize },

    #[error("configuration error: {0}")]
    ConfigError(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, MfcError>;
