//! Operational shell: run configuration, checkpoint persistence, metrics
//! emission, and the end-to-end pipelines behind the `pwm` CLI.

pub mod checkpoint;
pub mod config;
pub mod metrics;

pub use checkpoint::{rng_from_state, rng_state_bytes, Checkpoint};
pub use config::{RunConfig, DEFAULT_KEYS};
pub use metrics::{iqm, mean, std_dev, MetricsTable, SeedSummary};
