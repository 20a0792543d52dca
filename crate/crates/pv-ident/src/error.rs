//! Error types shared across the identification pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PvError {
    /// A division in the eta -> physical map hit the positivity floor.
    #[error("degenerate eta vector: {context} = {value:e} is below the positivity floor")]
    DegenerateEta { context: &'static str, value: f64 },

    /// eta3 < eta2 would imply a negative irradiance current.
    #[error("eta3 = {eta3:e} < eta2 = {eta2:e}: irradiance current would be negative")]
    NegativeIrradianceCurrent { eta2: f64, eta3: f64 },

    /// The diode exponent left the representable range; the simulation is broken.
    #[error("exponent overflow: b*x = {exponent} exceeds the representable range")]
    ExpOverflow { exponent: f64 },

    /// A discrete step violated its accuracy or stability guard.
    #[error("step too large: {context} (dt = {dt:e}, limit = {limit:e})")]
    StepTooLarge {
        context: &'static str,
        dt: f64,
        limit: f64,
    },

    /// The steady-state bisection could not bracket a sign change.
    #[error("no sign change in [{lo}, {hi}]: inconsistent plant parameters")]
    BracketFailure { lo: f64, hi: f64 },

    /// The eta2 reconstruction filter was consumed before warm-up.
    #[error("eta2 denominator filter output {value:e} below 1e-30 (consumed before warm-up)")]
    DenominatorUnderflow { value: f64 },

    /// Gain calibration could not land the convergence time in the target band.
    #[error("calibration failed: {0}")]
    CalibrationFailure(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, PvError>;
