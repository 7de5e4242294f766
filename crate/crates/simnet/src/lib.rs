//! Deterministic discrete-event simulation of a device agent, the sync
//! server and dashboard clients over lossy links.

pub mod clock;
pub mod config;
pub mod link;
pub mod metrics;
pub mod sensor;
pub mod world;

pub use config::{CommandScript, ExperimentConfig, LoadConfig, ScriptedCommand, SubscriberConfig};
pub use link::{DuplexLink, LinkModel, Partition, PartitionMode};
pub use metrics::{LatencySummary, MetricsReport};
pub use sensor::{sample_sensor, SensorGenerator, SensorModel};
pub use world::{run_experiment, run_experiment_traced, trace_to_jsonl, TraceRecord};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid experiment config: {0}")]
    ConfigInvalid(String),
}
