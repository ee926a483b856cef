use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("rate parameter beta must be positive, got {0}")]
    NonPositiveBeta(f64),
    #[error("tabulated rate values must be positive and finite (entry {index}: {value})")]
    InvalidRateValue { index: usize, value: f64 },
    #[error("rate table not nondecreasing at entry {index}: {prev} > {next}")]
    RateMonotonicity { index: usize, prev: f64, next: f64 },
    #[error("first tabulated rate must be >= 1 (got {0}), otherwise r(0) > r(1)")]
    FirstRateBelowOne(f64),
    #[error("rate consistency r(z)*r(1-z)=1 violated at z={z}: |log defect| = {defect:e}")]
    RateConsistency { z: i64, defect: f64 },
    #[error("slope {z} outside tabulated rate domain [{min}, {max}]")]
    SlopeOutOfDomain { z: i64, min: i64, max: i64 },
    #[error("log rate {0} exceeds the exponentiation cap; value not representable")]
    RateOverflow(f64),
    #[error("theta = {theta} not admissible: |theta| must stay below theta_bar = {theta_bar}")]
    ThetaNotAdmissible { theta: f64, theta_bar: f64 },
    #[error("tail target {target:e} unachievable within rate-function domain (reached {reached:e})")]
    TailUnachievable { target: f64, reached: f64 },
    #[error("mean slope u = {u} outside the attained range [{min}, {max}]")]
    MeanOutOfRange { u: f64, min: f64, max: f64 },
    #[error("Rankine-Hugoniot speed degenerate: means differ by only {0:e}")]
    DegenerateMeans(f64),
    #[error("flux cross-check failed: direct expectation {direct} vs 2cosh(theta) {closed}")]
    FluxMismatch { direct: f64, closed: f64 },
    #[error("state space too large: {states} states exceeds budget {budget}")]
    StateSpaceOverflow { states: u128, budget: u128 },
    #[error("total event rate is zero; nothing can happen")]
    ZeroTotalRate,
    #[error("tracer at window boundary (Q = {q}, window size {n})")]
    TracerAtBoundary { q: usize, n: usize },
    #[error("elapsed time is zero; no speed estimate possible")]
    ZeroElapsedTime,
    #[error("shock front reached the lattice boundary; run aborted")]
    FrontReachedBoundary,
    #[error("rarefaction-ordered data (u_left {u_left} < u_right {u_right}) not supported")]
    RarefactionData { u_left: f64, u_right: f64 },
    #[error("cylinder window invalid: [{a}, {b}]")]
    BadWindow { a: i64, b: i64 },
    #[error("profile has per-site overrides; this operation needs a pure two-sided profile")]
    ProfileNotTwoSided,
    #[error("override at site {site} lies outside the evaluation window [{a}, {b}]")]
    OverrideOutsideWindow { site: i64, a: i64, b: i64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
