//! The continual protocol: configuration, training and evaluation, metrics,
//! cost accounting, checkpoints, results files and plots.

pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod kde;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod plot;
pub mod report;
pub mod runner;

pub use config::{expand_sweep, Method, RunConfig};
pub use metrics::{average_accuracy, forgetting_profile, Forgetting, MetricsMatrix};
pub use model::Model;
pub use runner::{resume, run, run_sweep, RunResults, Runner};
