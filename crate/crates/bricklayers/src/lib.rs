//! Simulation and exact-verification laboratory for one-dimensional
//! bricklayers' domain-growth models.
//!
//! The crate covers the full pipeline from rate functions to macroscopic
//! shock experiments:
//!
//! * [`rates`] — validated jump-rate functions (exponential family and
//!   tabulated perturbations);
//! * [`gibbs`] — one-site canonical Gibbs measures, moments, flux, and
//!   Rankine-Hugoniot speeds;
//! * [`engine`] — event-driven continuous-time dynamics on finite lattices
//!   plus an exact small-system generator oracle;
//! * [`tracer`] — the defect-tracer coupling and the process as seen from
//!   the tracer, with speed and marginal measurements;
//! * [`verifier`] — exact truncated-sum generator expectations certifying
//!   stationarity and its failure;
//! * [`experiments`] — reproducible end-to-end experiments and their CLI.

pub mod error;
pub mod rates;
pub mod sum_tree;
pub mod gibbs;
pub mod engine;
pub mod tracer;
pub mod verifier;
pub mod experiments;
pub mod cli;

pub use error::{Error, Result};
pub use rates::{RateFunction, RateKind, ThetaBar};
