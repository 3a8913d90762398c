//! Application-facing async API over one device: a compute context that
//! runs the physics, a graphics context that renders, and the stream
//! binding calls that co-schedule them.

use std::collections::BTreeMap;

use serde::Serialize;

use super::costs::PhaseCost;
use crate::channel::{ChannelId, ContextId, ContextKind, StreamId};
use crate::device::{Device, DeviceConfig};
use crate::engine::GpuCommand;
use crate::error::WorkloadError;
use crate::vm::{SizeClass, VirtAddr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Sim,
    Render,
    Inference,
}

/// One phase instance as it actually ran.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub group: usize,
    pub k: usize,
    pub batch: u32,
    pub start: f64,
    pub end: f64,
}

/// Receipt for an async launch. Waiting consumes it.
#[derive(Debug)]
#[must_use = "an async launch must be waited on"]
pub struct AsyncHandle {
    phase: Phase,
    k: usize,
    group: usize,
    batch: u32,
    target: u64,
    stream: StreamId,
    channel: ChannelId,
    seq: u64,
}

impl AsyncHandle {
    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn step(&self) -> usize {
        self.k
    }

    pub fn group(&self) -> usize {
        self.group
    }

    pub fn target(&self) -> u64 {
        self.target
    }
}

#[derive(Debug, Default, Clone)]
struct GroupState {
    sims_done: usize,
    renders_issued: usize,
    render_in_flight: bool,
}

pub struct Testbed {
    pub dev: Device,
    pub compute: ContextId,
    pub graphics: ContextId,
    pub sim_stream: StreamId,
    pub render_stream: StreamId,
    costs: PhaseCost,
    state_buf: VirtAddr,
    frame_buf: VirtAddr,
    sim_in_flight: bool,
    groups: BTreeMap<usize, GroupState>,
    records: Vec<PhaseRecord>,
}

impl Testbed {
    pub fn new(cfg: DeviceConfig, costs: PhaseCost) -> Result<Self, WorkloadError> {
        costs.validate()?;
        let mut dev = Device::new(cfg)?;
        let compute = dev.create_context(ContextKind::Compute)?;
        let graphics = dev.create_context(ContextKind::Graphics)?;
        dev.provision_forwarding_pool(graphics, dev.config().hw_max_queues)?;
        let sim_stream = dev.create_stream(compute)?;
        let render_stream = dev.create_stream(graphics)?;
        let cspace = dev.context(compute)?.address_space();
        let gspace = dev.context(graphics)?.address_space();
        let state_buf = dev.map_fresh(cspace, 4, SizeClass::Big)?;
        let frame_buf = dev.map_fresh(gspace, 4, SizeClass::Big)?;
        Ok(Self {
            dev,
            compute,
            graphics,
            sim_stream,
            render_stream,
            costs,
            state_buf,
            frame_buf,
            sim_in_flight: false,
            groups: BTreeMap::new(),
            records: Vec::new(),
        })
    }

    pub fn costs(&self) -> &PhaseCost {
        &self.costs
    }

    pub fn records(&self) -> &[PhaseRecord] {
        &self.records
    }

    /// Compute-space buffer the simulation kernels read and write.
    pub fn state_buffer(&self) -> VirtAddr {
        self.state_buf
    }

    pub fn custream_bind(&mut self) -> Result<(), WorkloadError> {
        Ok(self.dev.bind(self.sim_stream, self.graphics)?)
    }

    pub fn custream_unbind(&mut self) -> Result<(), WorkloadError> {
        Ok(self.dev.unbind(self.sim_stream)?)
    }

    /// Launches the simulation of step `k` for environment group `group`.
    pub fn step_async(&mut self, group: usize, k: usize, batch: u32) -> Result<AsyncHandle, WorkloadError> {
        if self.sim_in_flight {
            return Err(WorkloadError::Dependency(
                "previous simulation step has not been waited on".into(),
            ));
        }
        let g = self.groups.entry(group).or_default();
        if k != g.sims_done {
            return Err(WorkloadError::Dependency(format!(
                "sim({k}) of group {group} issued before sim({}) completed",
                g.sims_done
            )));
        }
        let cmd = GpuCommand::kernel(
            self.costs.sim(batch),
            self.costs.sim_compute_frac,
            vec![self.state_buf],
        );
        let h = self.launch(self.sim_stream, Phase::Sim, group, k, batch, cmd)?;
        self.sim_in_flight = true;
        Ok(h)
    }

    pub fn wait_step(&mut self, h: AsyncHandle) -> Result<(), WorkloadError> {
        if h.phase != Phase::Sim {
            return Err(WorkloadError::Dependency("wait_step given a render handle".into()));
        }
        self.wait(&h)?;
        self.sim_in_flight = false;
        self.groups.entry(h.group).or_default().sims_done = h.k + 1;
        Ok(())
    }

    /// Launches rendering of step `k` for `group` on the graphics queue.
    pub fn render_async(&mut self, group: usize, k: usize, batch: u32) -> Result<AsyncHandle, WorkloadError> {
        let g = self.groups.entry(group).or_default();
        if g.sims_done <= k {
            return Err(WorkloadError::Dependency(format!(
                "render({k}) of group {group} issued before sim({k}) completed"
            )));
        }
        if g.render_in_flight || k != g.renders_issued {
            return Err(WorkloadError::Dependency(format!(
                "render({k}) of group {group} issued out of order"
            )));
        }
        g.render_in_flight = true;
        g.renders_issued += 1;
        let cmd = GpuCommand::draw(
            self.costs.render(batch),
            self.costs.render_compute_frac,
            self.costs.render_graphics_frac,
            vec![self.frame_buf],
        );
        self.launch(self.render_stream, Phase::Render, group, k, batch, cmd)
    }

    pub fn wait_render(&mut self, h: AsyncHandle) -> Result<(), WorkloadError> {
        if h.phase != Phase::Render {
            return Err(WorkloadError::Dependency("wait_render given a sim handle".into()));
        }
        self.wait(&h)?;
        self.groups.entry(h.group).or_default().render_in_flight = false;
        Ok(())
    }

    /// Blocks the host for the policy forward pass of `batch` environments.
    pub fn inference(&mut self, group: usize, k: usize, batch: u32) {
        let start = self.dev.now();
        self.dev.run_for(self.costs.inference(batch));
        self.records.push(PhaseRecord {
            phase: Phase::Inference,
            group,
            k,
            batch,
            start,
            end: self.dev.now(),
        });
    }

    fn launch(
        &mut self,
        stream: StreamId,
        phase: Phase,
        group: usize,
        k: usize,
        batch: u32,
        cmd: GpuCommand,
    ) -> Result<AsyncHandle, WorkloadError> {
        let target = self.dev.submit(stream, vec![cmd])?;
        let channel = self.dev.stream(stream)?.channel_ref();
        let seq = self.dev.channel(channel)?.userd().put - 1;
        Ok(AsyncHandle {
            phase,
            k,
            group,
            batch,
            target,
            stream,
            channel,
            seq,
        })
    }

    fn wait(&mut self, h: &AsyncHandle) -> Result<(), WorkloadError> {
        let (stream, target, ch) = (h.stream, h.target, h.channel);
        self.dev
            .run_until(|d| d.semaphore_value(stream) >= target || d.channel(ch).is_ok_and(|c| c.faulted()))?;
        if self.dev.semaphore_value(stream) < target {
            return Err(WorkloadError::Faulted(self.dev.faults().len()));
        }
        let (start, end) = self
            .dev
            .exec_records()
            .iter()
            .rev()
            .filter(|e| e.channel == h.channel && e.seq == h.seq)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(s, e), r| {
                (s.min(r.start), e.max(r.end))
            });
        self.records.push(PhaseRecord {
            phase: h.phase,
            group: h.group,
            k: h.k,
            batch: h.batch,
            start,
            end,
        });
        Ok(())
    }

    /// Ensures the stream is unbound and everything issued has finished.
    pub fn finish(&mut self) -> Result<(), WorkloadError> {
        if self.dev.stream(self.sim_stream)?.is_bound() {
            self.custream_unbind()?;
        }
        self.dev.run_until_idle();
        if !self.dev.faults().is_empty() {
            return Err(WorkloadError::Faulted(self.dev.faults().len()));
        }
        Ok(())
    }
}
