//! Training, evaluation, synthetic data and analysis tools built on the model.

pub mod metrics;
pub mod synthetic;
pub mod export;
pub mod gradsuite;
pub mod train;

pub use metrics::MetricsReport;
pub use synthetic::{LabelRule, SyntheticSpec};
pub use train::{evaluate, load_run, predict, save_run, train, RunConfig, TrainConfig, Trained};
