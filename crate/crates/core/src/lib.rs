//! Joint latent-process mixed models for multivariate longitudinal markers
//! and threshold-defined clinical endpoints.
//!
//! Each latent domain is a linear mixed model observed through several
//! markers after a monotone link transformation. Clinical endpoints are
//! binary statuses that turn positive when a noisy linear combination of the
//! domains (a degradation process) exceeds a covariate-specific threshold.
//! The likelihood has a closed form in terms of multivariate normal CDFs,
//! maximized with a Marquardt-type Newton algorithm.

pub mod error;
pub mod estimate;
pub mod io;
pub mod likelihood;
pub mod links;
pub mod model;
pub mod mvn;
pub mod predict;
pub mod simulate;

pub use error::{Error, Result};
