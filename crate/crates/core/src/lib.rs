//! Deterministic desk-scale simulator for federated continual instruction
//! tuning.
//!
//! The server maintains a dynamic cache of task subspaces: low-rank adapter
//! pairs routed by identity-token matching (DKO) and recombined at inference
//! time through similarity-weighted activation factors (SSA). The benchmark
//! side generates synthetic instruction-tuning tasks, partitions them across
//! clients with a Dirichlet draw, and runs staged federated training with
//! catastrophic-forgetting metrics.
//!
//! Every run is a pure function of its config and seed; artifacts
//! (`results_matrix.csv`, `metrics.json`, `rounds.csv`) are byte-reproducible.

pub mod aggregate;
pub mod bench;
pub mod dko;
pub mod embed;
pub mod error;
pub mod lowrank;
pub mod metrics;
pub mod run;
pub mod seeds;
pub mod ssa;
pub mod trainer;

pub use aggregate::{
    fed_avg, fed_opt, pseudo_gradient, Aggregator, AggregatorRegistry, AggregatorSpec,
    AggregatorState,
};
pub use bench::{
    compose_scenario, dirichlet_partition, make_task_family, make_task_family_with, ClientShard,
    Example, FamilyParams, ScenarioBundle, ScenarioConfig, ScenarioMode, ScenarioSchedule,
    SyntheticTask,
};
pub use dko::{
    merge_global_token, pair_mismatched, ClientUpdate, DynamicCache, RoundAssignment,
    SubspaceChoice, SubspaceEntry,
};
pub use embed::{encode, local_token, EncoderSpec, IdentityToken};
pub use error::{Error, Result};
pub use lowrank::{concat_adapters, cosine, LowRankAdapter, Matrix};
pub use metrics::ResultsMatrix;
pub use run::{
    run_scenario, write_artifacts, MetricsReport, RoundRecord, RunConfig, RunMode, RunOutput,
};
pub use ssa::{
    activations, assemble, mixing_matrix, scores, scores_for_encoding, ActivationPolicy,
    ActivationRegistry, ActivationRule, ActivationVector,
};
pub use trainer::{local_train, predict, ClientModel};
