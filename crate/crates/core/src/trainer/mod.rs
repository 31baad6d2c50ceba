//! Synthetic-data training of stacked null-expert MoE layers.

pub mod balance;
pub mod model;
pub mod optim;
pub mod run;
pub mod schedule;
pub mod synth;

pub use model::{Model, ModelConfig};
pub use run::{train, RunConfig, RunSummary, TrainConfig, TrainOutcome};
