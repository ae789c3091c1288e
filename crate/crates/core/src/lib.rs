//! Functional hidden dynamic geostatistical models for space-time profile
//! data.
//!
//! Observed profiles `y(s, h, t)` are modelled as covariate effects with
//! functional coefficients plus a latent field `phi(h)' z(s, t)` whose
//! coefficients follow a spatially correlated AR(1) process. The crate
//! covers ingestion, basis construction, balanced site partitioning, EM
//! estimation with Kalman smoothing, parameter covariance via truncated
//! information, dynamic kriging and out-of-sample validation.

pub mod basis;
pub mod error;
pub mod estimation;
pub mod exec;
pub mod inference;
pub mod ingest;
pub mod partition;
pub mod predict;
pub mod spatial;
pub mod statespace;

pub use error::{Error, Result};
