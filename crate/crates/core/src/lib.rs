//! Target search in a database driven purely by noisy pairwise comparisons.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: points, bisecting hyperplanes, reflections.
//! - [`oracle`]: the probit answer model and noise calibration.
//! - [`belief`]: the Gaussian target belief, its optimal query direction and
//!   the assumed-density-filtering update.
//! - [`catalog`]: object storage and a k-d tree for nearest-unused lookups.
//! - [`search`]: the search session state machine (mirror sampling, updates,
//!   stop rules) and the dense-space convergence simulators.
//! - [`embed`]: variational Gaussian triplet embedding.
//! - [`learn2search`]: alternating search and embedding retrains when object
//!   features are hidden.
//! - [`baselines`]: discrete-posterior strategies used for benchmarking.

pub mod baselines;
pub mod belief;
pub mod catalog;
pub mod embed;
mod error;
pub mod geometry;
pub mod learn2search;
pub mod numeric;
pub mod oracle;
pub mod rng;
pub mod search;
pub mod stats;

pub use error::{Error, Result};
