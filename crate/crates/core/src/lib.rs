//! Policy-based few-step flow generation on analytic toy densities.
//!
//! A student network maps an origin state `(x_src, t_src)` to a network-free
//! policy (a grid of denoised estimates, or a Gaussian mixture with a
//! closed-form posterior velocity). The policy is integrated with many cheap
//! substeps, and the student is trained by on-policy imitation of an exact
//! Gaussian-mixture teacher.

pub mod error;
pub mod config;
pub mod distill;
pub mod gm;
pub mod io;
pub mod metrics;
pub mod numeric;
pub mod ode;
pub mod plot;
pub mod policy;
pub mod rng;
pub mod sampling;
pub mod schedule;
pub mod student;
pub mod teacher;

pub use error::{Error, Result};
