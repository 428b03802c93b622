//! Experiment suites over the search engine: synthetic data, query and
//! compute benchmarks, blind-setting runs, convergence traces, noise
//! calibration and embedding evaluation.

pub mod data;
pub mod metrics;
pub mod pca;
pub mod spec;
pub mod suites;

pub use data::{gen_hypercube, load_dataset};
pub use metrics::{summarise, MetricsRow, Summary};
pub use pca::pca_project;
pub use spec::{BlindSpec, ConvergenceSpec, Dataset, EmbedSpec, ExperimentSpec, Suite};
