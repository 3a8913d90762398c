//! Workload layer: phase costs, the async step/render API and the
//! data-generation and RL-rollout loops built on it.

mod api;
mod costs;
mod loops;

pub use api::{AsyncHandle, Phase, PhaseRecord, Testbed};
pub use costs::{EnvPreset, PhaseCost};
pub use loops::{
    run_datagen, run_rl_rollout, DatagenMode, EpisodeSpec, Metrics, RolloutMode, RolloutSpec,
};
