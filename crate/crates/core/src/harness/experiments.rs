//! The four experiments behind the command line: datagen and RL sweeps,
//! the graft-versus-export microbenchmark, and utilization traces.
//!
//! Every experiment renders its outputs into memory first so reruns can be
//! compared byte for byte.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::audit::audit_device;
use crate::device::Device;
use crate::error::HarnessError;
use crate::event::Event;
use crate::vm::{Mmu, SizeClass, SpaceId, VirtAddr};
use crate::workload::{
    run_datagen, run_rl_rollout, DatagenMode, EpisodeSpec, Metrics, PhaseCost, RolloutMode, RolloutSpec,
    Testbed,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Datagen,
    Rl,
    Graftbench,
    Trace,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub json_events: bool,
    pub dump_tables: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub env: String,
    pub mode: String,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "B")]
    pub b: u32,
    #[serde(rename = "G")]
    pub g: u32,
    pub makespan: f64,
    pub throughput: f64,
    pub speedup_vs_sequential: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraftRow {
    pub n_buffers: u64,
    pub export_import_ops: u64,
    pub graft_ops: u64,
    pub graft_entry_writes: u64,
    pub propagated_writes: u64,
    pub tlb_invalidations: u64,
    pub new_pdes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilLine {
    pub run: String,
    pub time: f64,
    pub compute_util: f64,
    pub graphics_util: f64,
    pub active_tsg: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLine {
    pub run: String,
    #[serde(flatten)]
    pub event: Event,
}

/// Rendered output files of one experiment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outputs {
    pub summary_csv: String,
    pub utilization_jsonl: String,
    pub events_jsonl: Option<String>,
    pub tables_json: Option<String>,
}

impl Outputs {
    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("summary.csv"), &self.summary_csv)?;
        std::fs::write(dir.join("utilization.jsonl"), &self.utilization_jsonl)?;
        if let Some(e) = &self.events_jsonl {
            std::fs::write(dir.join("events.jsonl"), e)?;
        }
        if let Some(t) = &self.tables_json {
            std::fs::write(dir.join("tables.json"), t)?;
        }
        Ok(())
    }
}

pub fn run_experiment(
    which: Experiment,
    cfg: &ExperimentConfig,
    opts: RunOptions,
) -> Result<Outputs, HarnessError> {
    cfg.validate()?;
    match which {
        Experiment::Datagen => cmd_datagen(cfg, opts),
        Experiment::Rl => cmd_rl(cfg, opts),
        Experiment::Graftbench => cmd_graftbench(cfg, opts),
        Experiment::Trace => cmd_trace(cfg, opts),
    }
}

/// One finished simulation plus what the writers need from it.
struct Run {
    label: String,
    metrics: Metrics,
    util: Vec<UtilLine>,
    events: Vec<Event>,
    tables: Option<serde_json::Value>,
}

impl Run {
    fn capture(
        label: String,
        tb: &Testbed,
        metrics: Metrics,
        cfg: &ExperimentConfig,
        opts: RunOptions,
    ) -> Result<Self, HarnessError> {
        audit_device(&tb.dev).map_err(|e| HarnessError::Invariant(format!("{label}: {e}")))?;
        let util = utilization(&tb.dev, &label, cfg.run.sample_interval, metrics.makespan);
        let events = if opts.json_events { tb.dev.events().to_vec() } else { Vec::new() };
        let tables = if opts.dump_tables { Some(dump_testbed(tb)?) } else { None };
        Ok(Self {
            label,
            metrics,
            util,
            events,
            tables,
        })
    }
}

fn utilization(dev: &Device, label: &str, interval: f64, until: f64) -> Vec<UtilLine> {
    dev.sample_utilization(interval, until.max(interval))
        .into_iter()
        .map(|s| UtilLine {
            run: label.to_string(),
            time: s.time,
            compute_util: s.compute_util,
            graphics_util: s.graphics_util,
            active_tsg: s.active_tsg,
        })
        .collect()
}

fn dump_testbed(tb: &Testbed) -> Result<serde_json::Value, HarnessError> {
    let mut spaces = Vec::new();
    for ctx in [tb.compute, tb.graphics] {
        let space = tb.dev.context(ctx)?.address_space();
        spaces.push(serde_json::to_value(tb.dev.mmu().dump_table(space)?)?);
    }
    Ok(serde_json::Value::Array(spaces))
}

/// Scales every duration coefficient by an independent factor in
/// `[1 - jitter, 1 + jitter]`, seeded per sweep point.
fn jittered(base: PhaseCost, jitter: f64, seed: u64, point: usize) -> PhaseCost {
    if jitter == 0.0 {
        return base;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (point as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut f = || 1.0 + jitter * rng.random_range(-1.0..=1.0);
    PhaseCost {
        sim_base: base.sim_base * f(),
        sim_per_env: base.sim_per_env * f(),
        render_base: base.render_base * f(),
        render_per_env: base.render_per_env * f(),
        inference_base: base.inference_base * f(),
        inference_per_env: base.inference_per_env * f(),
        ..base
    }
}

fn render(runs: &[Run], rows: &[SummaryRow], opts: RunOptions) -> Result<Outputs, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let summary_csv = String::from_utf8(w.into_inner().map_err(|e| e.into_error())?)
        .expect("csv output is utf-8");
    Ok(Outputs {
        summary_csv,
        utilization_jsonl: json_lines(runs.iter().flat_map(|r| &r.util))?,
        events_jsonl: if opts.json_events {
            Some(json_lines(runs.iter().flat_map(|r| {
                r.events.iter().map(|e| EventLine {
                    run: r.label.clone(),
                    event: e.clone(),
                })
            }))?)
        } else {
            None
        },
        tables_json: if opts.dump_tables {
            let map: serde_json::Map<_, _> = runs
                .iter()
                .filter_map(|r| r.tables.clone().map(|t| (r.label.clone(), t)))
                .collect();
            Some(serde_json::to_string_pretty(&map)? + "\n")
        } else {
            None
        },
    })
}

fn json_lines<T: Serialize>(items: impl IntoIterator<Item = T>) -> Result<String, HarnessError> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(&it)?);
        out.push('\n');
    }
    Ok(out)
}

fn row(env: &str, mode: &str, k: usize, b: u32, g: u32, m: &Metrics, seq_makespan: f64) -> SummaryRow {
    SummaryRow {
        env: env.to_string(),
        mode: mode.to_string(),
        k,
        b,
        g,
        makespan: m.makespan,
        throughput: m.throughput,
        speedup_vs_sequential: if m.makespan > 0.0 { seq_makespan / m.makespan } else { 1.0 },
    }
}

fn datagen_pair(
    cfg: &ExperimentConfig,
    opts: RunOptions,
    costs: PhaseCost,
    steps: usize,
    batch: u32,
) -> Result<[Run; 2], HarnessError> {
    let one = |mode: DatagenMode, name: &str| -> Result<Run, HarnessError> {
        let mut tb = Testbed::new(cfg.device.device_config(), costs)?;
        let m = run_datagen(&mut tb, EpisodeSpec { steps, batch, mode })?;
        Run::capture(format!("datagen/B={batch}/{name}"), &tb, m, cfg, opts)
    };
    Ok([one(DatagenMode::Sequential, "sequential")?, one(DatagenMode::Pipelined, "pipelined")?])
}

pub fn cmd_datagen(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Outputs, HarnessError> {
    let env = cfg.env_label();
    let k = cfg.workload.steps;
    let pairs = cfg
        .workload
        .batches
        .par_iter()
        .enumerate()
        .map(|(i, &b)| {
            let costs = jittered(cfg.datagen_costs(), cfg.run.jitter, cfg.run.seed, i);
            datagen_pair(cfg, opts, costs, k, b)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::new();
    for (&b, [seq, pipe]) in cfg.workload.batches.iter().zip(&pairs) {
        let base = seq.metrics.makespan;
        rows.push(row(&env, "sequential", k, b, 1, &seq.metrics, base));
        rows.push(row(&env, "pipelined", k, b, 1, &pipe.metrics, base));
    }
    let runs: Vec<Run> = pairs.into_iter().flatten().collect();
    render(&runs, &rows, opts)
}

pub fn cmd_rl(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Outputs, HarnessError> {
    let env = cfg.env_label();
    let (k, groups) = (cfg.workload.horizon, cfg.workload.groups);
    let pairs = cfg
        .workload
        .batches
        .par_iter()
        .enumerate()
        .map(|(i, &b)| -> Result<[Run; 2], HarnessError> {
            let costs = jittered(cfg.rollout_costs(), cfg.run.jitter, cfg.run.seed, i);
            let one = |mode: RolloutMode, g: u32, name: &str| -> Result<Run, HarnessError> {
                let mut tb = Testbed::new(cfg.device.device_config(), costs)?;
                let spec = RolloutSpec {
                    horizon: k,
                    batch: b,
                    groups: g,
                    mode,
                };
                let m = run_rl_rollout(&mut tb, spec)?;
                Run::capture(format!("rl/B={b}/{name}"), &tb, m, cfg, opts)
            };
            Ok([
                one(RolloutMode::Sequential, 1, "sequential")?,
                one(RolloutMode::Interleaved, groups, "interleaved")?,
            ])
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::new();
    for (&b, [seq, inter]) in cfg.workload.batches.iter().zip(&pairs) {
        let base = seq.metrics.makespan;
        rows.push(row(&env, "sequential", k, b, 1, &seq.metrics, base));
        rows.push(row(&env, "interleaved", k, b, groups, &inter.metrics, base));
    }
    let runs: Vec<Run> = pairs.into_iter().flatten().collect();
    render(&runs, &rows, opts)
}

fn map_big(mmu: &mut Mmu, space: SpaceId) -> Result<VirtAddr, HarnessError> {
    let va = mmu.allocate(space, 1, SizeClass::Big, None)?;
    let page = mmu.alloc_phys(SizeClass::Big);
    mmu.map_range(space, va, &[page])?;
    Ok(va)
}

/// Cost of sharing `n` big buffers from the compute space with the
/// graphics space, counted in page-table entry operations.
///
/// The export/import path touches each buffer twice (one export, one
/// import). The graft path pays the initial graft plus whatever later
/// allocations propagate to the subscriber.
pub fn graft_cost(cfg: &ExperimentConfig, n: u64) -> Result<(GraftRow, Mmu), HarnessError> {
    let dc = cfg.device.device_config();
    let mut mmu = Mmu::new(dc.geometry, dc.layout)?;
    let compute = mmu.create_space(mmu.high_range());
    let graphics = mmu.create_space(mmu.low_range());
    map_big(&mut mmu, compute)?;
    map_big(&mut mmu, graphics)?;
    let report = mmu.graft(compute, graphics)?;
    let before = mmu.space(graphics)?.counters();
    let pdes_before = mmu.space(compute)?.counters().pdes_created;
    let mut bufs = Vec::with_capacity(n as usize);
    for _ in 0..n {
        bufs.push(map_big(&mut mmu, compute)?);
    }
    for &va in &bufs {
        if mmu.walk(graphics, va).is_err() {
            return Err(HarnessError::Invariant(format!(
                "buffer {va} mapped after the graft does not resolve in the subscriber"
            )));
        }
    }
    let after = mmu.space(graphics)?.counters();
    let propagated = after.subscriber_writes - before.subscriber_writes;
    let tlb = report.tlb_invalidations + after.tlb_invalidations - before.tlb_invalidations;
    let row = GraftRow {
        n_buffers: n,
        export_import_ops: 2 * n,
        graft_ops: report.entry_writes + propagated + tlb,
        graft_entry_writes: report.entry_writes,
        propagated_writes: propagated,
        tlb_invalidations: tlb,
        new_pdes: mmu.space(compute)?.counters().pdes_created - pdes_before,
    };
    Ok((row, mmu))
}

pub fn cmd_graftbench(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Outputs, HarnessError> {
    let results = cfg
        .graftbench
        .buffers
        .par_iter()
        .map(|&n| graft_cost(cfg, n))
        .collect::<Result<Vec<_>, _>>()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for (r, _) in &results {
        w.serialize(r)?;
    }
    let summary_csv = String::from_utf8(w.into_inner().map_err(|e| e.into_error())?)
        .expect("csv output is utf-8");
    let tables_json = if opts.dump_tables {
        let mut map = serde_json::Map::new();
        for (r, mmu) in &results {
            let dumps = mmu
                .spaces()
                .map(|s| mmu.dump_table(s.id()).map(serde_json::to_value))
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .collect::<Result<Vec<_>, _>>()?;
            map.insert(format!("graftbench/N={}", r.n_buffers), serde_json::Value::Array(dumps));
        }
        Some(serde_json::to_string_pretty(&map)? + "\n")
    } else {
        None
    };
    Ok(Outputs {
        summary_csv,
        utilization_jsonl: String::new(),
        events_jsonl: opts.json_events.then(String::new),
        tables_json,
    })
}

/// Mean compute and graphics utilization over a run.
pub fn mean_utilization(m: &Metrics) -> (f64, f64) {
    if m.makespan > 0.0 {
        (m.engine.compute_busy / m.makespan, m.engine.graphics_busy / m.makespan)
    } else {
        (0.0, 0.0)
    }
}

pub fn cmd_trace(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Outputs, HarnessError> {
    let (k, b) = (cfg.trace.steps, cfg.trace.batch);
    let costs = jittered(cfg.datagen_costs(), cfg.run.jitter, cfg.run.seed, 0);
    let runs = datagen_pair(cfg, opts, costs, k, b)?;
    let (seq_c, _) = mean_utilization(&runs[0].metrics);
    let (pipe_c, _) = mean_utilization(&runs[1].metrics);
    // an empty workload leaves both traces at zero and there is nothing to compare
    if k > 0 && pipe_c <= seq_c {
        return Err(HarnessError::Invariant(format!(
            "pipelined mean compute utilization {pipe_c:.4} does not exceed sequential {seq_c:.4}"
        )));
    }
    let env = cfg.env_label();
    let base = runs[0].metrics.makespan;
    let rows = [
        row(&env, "sequential", k, b, 1, &runs[0].metrics, base),
        row(&env, "pipelined", k, b, 1, &runs[1].metrics, base),
    ];
    render(&runs, &rows, opts)
}
