//! The two integration loops, each in a baseline and an overlapped form.

use serde::{Deserialize, Serialize};

use super::api::{PhaseRecord, Testbed};
use crate::engine::EngineSummary;
use crate::error::WorkloadError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatagenMode {
    Sequential,
    Pipelined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    Sequential,
    Interleaved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub steps: usize,
    pub batch: u32,
    pub mode: DatagenMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RolloutSpec {
    pub horizon: usize,
    pub batch: u32,
    pub groups: u32,
    pub mode: RolloutMode,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub makespan: f64,
    pub env_steps: u64,
    pub throughput: f64,
    /// Semaphore values reached on the sim and render streams.
    pub sim_signals: u64,
    pub render_signals: u64,
    pub engine: EngineSummary,
    pub phases: Vec<PhaseRecord>,
}

fn metrics(tb: &Testbed, env_steps: u64) -> Metrics {
    let engine = tb.dev.summary();
    Metrics {
        makespan: engine.makespan,
        env_steps,
        throughput: if engine.makespan > 0.0 {
            env_steps as f64 / engine.makespan
        } else {
            0.0
        },
        sim_signals: tb.dev.semaphore_value(tb.sim_stream),
        render_signals: tb.dev.semaphore_value(tb.render_stream),
        engine,
        phases: tb.records().to_vec(),
    }
}

/// Data generation: `steps` rounds of simulate-then-render over the whole
/// batch. Pipelined mode binds the sim stream and overlaps sim(k+1) with
/// render(k).
pub fn run_datagen(tb: &mut Testbed, spec: EpisodeSpec) -> Result<Metrics, WorkloadError> {
    if spec.batch == 0 {
        return Err(WorkloadError::InvalidSpec("batch must be >= 1".into()));
    }
    let (b, n) = (spec.batch, spec.steps);
    if n == 0 {
        tb.finish()?;
        return Ok(metrics(tb, 0));
    }
    match spec.mode {
        DatagenMode::Sequential => {
            for k in 0..n {
                let h = tb.step_async(0, k, b)?;
                tb.wait_step(h)?;
                let r = tb.render_async(0, k, b)?;
                tb.wait_render(r)?;
            }
        }
        DatagenMode::Pipelined => {
            tb.custream_bind()?;
            let h = tb.step_async(0, 0, b)?;
            tb.wait_step(h)?;
            for k in 0..n {
                let r = tb.render_async(0, k, b)?;
                let next = if k + 1 < n {
                    Some(tb.step_async(0, k + 1, b)?)
                } else {
                    None
                };
                tb.wait_render(r)?;
                if let Some(h) = next {
                    tb.wait_step(h)?;
                }
            }
            tb.custream_unbind()?;
        }
    }
    tb.finish()?;
    Ok(metrics(tb, n as u64 * u64::from(b)))
}

/// RL rollout: per step, inference then simulation then rendering, whose
/// frames feed the next inference. Interleaved mode splits the batch into
/// groups and lets one group's simulation overlap another's rendering.
pub fn run_rl_rollout(tb: &mut Testbed, spec: RolloutSpec) -> Result<Metrics, WorkloadError> {
    if spec.horizon == 0 || spec.batch == 0 || spec.groups == 0 {
        return Err(WorkloadError::InvalidSpec("horizon, batch and groups must be >= 1".into()));
    }
    let (n, b) = (spec.horizon, spec.batch);
    match spec.mode {
        RolloutMode::Sequential => {
            for k in 0..n {
                tb.inference(0, k, b);
                let h = tb.step_async(0, k, b)?;
                tb.wait_step(h)?;
                let r = tb.render_async(0, k, b)?;
                tb.wait_render(r)?;
            }
        }
        RolloutMode::Interleaved => {
            if b % spec.groups != 0 {
                return Err(WorkloadError::InvalidSpec(format!(
                    "batch {b} does not split into {} groups",
                    spec.groups
                )));
            }
            let gb = b / spec.groups;
            let g_count = spec.groups as usize;
            tb.custream_bind()?;
            let mut renders: Vec<Option<_>> = (0..g_count).map(|_| None).collect();
            for k in 0..n {
                for g in 0..g_count {
                    if let Some(r) = renders[g].take() {
                        tb.wait_render(r)?;
                    }
                    tb.inference(g, k, gb);
                    let h = tb.step_async(g, k, gb)?;
                    tb.wait_step(h)?;
                    renders[g] = Some(tb.render_async(g, k, gb)?);
                }
            }
            for r in renders.into_iter().flatten() {
                tb.wait_render(r)?;
            }
            tb.custream_unbind()?;
        }
    }
    tb.finish()?;
    Ok(metrics(tb, n as u64 * u64::from(b)))
}
