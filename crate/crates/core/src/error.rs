use thiserror::Error;

/// Errors raised by the simulator.
///
/// Several variants are diagnostics rather than bugs: the jump law and the
/// guidance law are singular where the pilot state vanishes, and a run that
/// lands on such a point is aborted with the offending values.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("Fock space of {modes} modes exceeds the cap of {cap} modes")]
    ModeCapExceeded { modes: usize, cap: usize },

    #[error("x-grid incompatible with momentum grid: dx*dp*M = {product}, expected 2*pi")]
    GridMismatch { product: f64 },

    #[error("sector dimension {dimension} exceeds the cap {cap}")]
    SectorTooLarge { dimension: u128, cap: usize },

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("invalid configuration {sites:?}: {reason}")]
    InvalidConfiguration { sites: Vec<usize>, reason: String },

    #[error("step too large: dt * rate bound = {product:.3e} exceeds {bound}")]
    StepTooLarge { product: f64, bound: f64 },

    #[error("norm drift {drift:.3e} per unit time exceeds {tolerance:.1e}")]
    NormDrift { drift: f64, tolerance: f64 },

    #[error("orbitals are linearly dependent (Gram determinant {gram_det:.3e})")]
    DegenerateOrbitals { gram_det: f64 },

    #[error("probability {probability:.3e} of configuration #{config} is below the floor {floor:.1e}")]
    SourceProbabilityUnderflow { config: usize, probability: f64, floor: f64 },

    #[error("total jump rate * dt = {product:.3e} exceeds {bound} at t = {time}")]
    RateStepOverflow { time: f64, product: f64, bound: f64 },

    #[error("cannot pair an odd number of sites ({0})")]
    OddSiteCount(usize),

    #[error("position {position} lies outside the grid [{lower}, {upper})")]
    OutOfGrid { position: f64, lower: f64, upper: f64 },

    #[error("density {density:.3e} below the node threshold at t = {time}")]
    NodeReached { time: f64, density: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter { field, reason: reason.into() }
}
