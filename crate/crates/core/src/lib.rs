//! Deterministic simulator for federated learning with incremental
//! clustering of clients by update similarity.

pub mod clustering;
pub mod data;
pub mod error;
pub mod federation;
pub mod harness;
pub mod model;
pub mod params;
pub mod similarity;
pub mod threat;

pub use clustering::{ClusterPartition, WeightedGraph};
pub use data::{ClientDataset, ScenarioKind, ScenarioSpec};
pub use error::{FlicError, Result};
pub use federation::{AggregationRule, RoundReport, ServerState, UpdateMemory, UpdateRecord};
pub use harness::{load_config, run_experiment, ExperimentConfig, ExperimentOutcome};
pub use model::{ModelKind, ModelSpec};
pub use params::ParamVector;
pub use similarity::SimilarityMatrix;
pub use threat::{AttackKind, ThreatModel};
