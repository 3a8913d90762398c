//! Configuration loading and the experiment drivers used by the CLI.

pub mod config;
pub mod experiments;

pub use config::{
    CostSection, DeviceSection, ExperimentConfig, GraftbenchSection, RunSection, TraceSection, WorkloadSection,
};
pub use experiments::{
    cmd_datagen, cmd_graftbench, cmd_rl, cmd_trace, graft_cost, mean_utilization, run_experiment, EventLine,
    Experiment, GraftRow, Outputs, RunOptions, SummaryRow, UtilLine,
};
