//! The simulated device: one page-table manager, the contexts and channels
//! built on it, the runlist, and the event-driven execution engine.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::channel::{
    Channel, ChannelId, ComputeConfig, Context, ContextId, DoorbellToken, StreamHandle, StreamId,
};
use crate::engine::{EngineState, FaultRecord, GpuCommand, TimesliceGroup, TsgId};
use crate::error::{ChannelError, VmError};
use crate::event::Event;
use crate::vm::{GraftReport, Mmu, PageGeometry, SpaceId, VaLayout, VirtAddr};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub geometry: PageGeometry,
    pub layout: VaLayout,
    /// TSG timeslice length in sim-time units.
    pub quantum: f64,
    /// Dead time charged when the runlist switches to a different TSG.
    pub switch_penalty: f64,
    pub hw_max_queues: u32,
    pub ring_capacity: u32,
    pub compute_capacity: f64,
    pub graphics_capacity: f64,
    pub pushbuffer_slot_bytes: u64,
    pub default_compute: ComputeConfig,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self {
            geometry: PageGeometry::default(),
            layout: VaLayout::default(),
            quantum: 0.1,
            switch_penalty: 0.0,
            hw_max_queues: 8,
            ring_capacity: 1024,
            compute_capacity: 1.0,
            graphics_capacity: 1.0,
            pushbuffer_slot_bytes: 256,
            default_compute: ComputeConfig::default(),
        }
    }
}

impl DeviceConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.geometry.validate().map_err(|e| e.to_string())?;
        self.layout
            .validate(&self.geometry)
            .map_err(|e| e.to_string())?;
        if !(self.quantum > 0.0 && self.quantum.is_finite()) {
            return Err("quantum must be positive".into());
        }
        if !(self.switch_penalty >= 0.0 && self.switch_penalty.is_finite()) {
            return Err("switch_penalty must be non-negative".into());
        }
        if self.hw_max_queues == 0 {
            return Err("hw_max_queues must be at least 1".into());
        }
        if self.ring_capacity == 0 {
            return Err("ring_capacity must be at least 1".into());
        }
        if !(self.compute_capacity > 0.0 && self.graphics_capacity > 0.0) {
            return Err("capacities must be positive".into());
        }
        if self.pushbuffer_slot_bytes == 0
            || self.pushbuffer_slot_bytes > 1 << self.geometry.page_shift
        {
            return Err("pushbuffer_slot_bytes must be in 1..=page size".into());
        }
        Ok(())
    }
}

/// Switches that deliberately break the mechanisms, for negative tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Knobs {
    pub graft_on_bind: bool,
    pub bootstrap_on_bind: bool,
}

impl Default for Knobs {
    fn default() -> Self {
        Self {
            graft_on_bind: true,
            bootstrap_on_bind: true,
        }
    }
}

pub struct Device {
    pub(crate) cfg: DeviceConfig,
    pub(crate) knobs: Knobs,
    pub(crate) mmu: Mmu,
    pub(crate) contexts: Vec<Context>,
    pub(crate) channels: Vec<Channel>,
    pub(crate) tsgs: Vec<TimesliceGroup>,
    pub(crate) runlist: Vec<TsgId>,
    pub(crate) streams: Vec<StreamHandle>,
    pub(crate) tokens: BTreeMap<DoorbellToken, ChannelId>,
    pub(crate) grafts: BTreeMap<(ContextId, ContextId), GraftReport>,
    pub(crate) cmdbufs: BTreeMap<(SpaceId, VirtAddr), Vec<GpuCommand>>,
    /// Device memory words keyed by (physical page, byte offset).
    pub(crate) memory: BTreeMap<(u64, u64), u64>,
    pub(crate) engine: EngineState,
    pub(crate) log: Vec<Event>,
    pub(crate) faults: Vec<FaultRecord>,
    pub(crate) micro_ops: u64,
}

impl Device {
    pub fn new(cfg: DeviceConfig) -> Result<Self, VmError> {
        cfg.validate().map_err(VmError::Geometry)?;
        let mmu = Mmu::new(cfg.geometry, cfg.layout)?;
        Ok(Self {
            cfg,
            knobs: Knobs::default(),
            mmu,
            contexts: Vec::new(),
            channels: Vec::new(),
            tsgs: Vec::new(),
            runlist: Vec::new(),
            streams: Vec::new(),
            tokens: BTreeMap::new(),
            grafts: BTreeMap::new(),
            cmdbufs: BTreeMap::new(),
            memory: BTreeMap::new(),
            engine: EngineState::default(),
            log: Vec::new(),
            faults: Vec::new(),
            micro_ops: 0,
        })
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.cfg
    }

    pub fn knobs(&self) -> Knobs {
        self.knobs
    }

    pub fn set_knobs(&mut self, knobs: Knobs) {
        self.knobs = knobs;
    }

    pub fn mmu(&self) -> &Mmu {
        &self.mmu
    }

    pub fn mmu_mut(&mut self) -> &mut Mmu {
        &mut self.mmu
    }

    pub fn context(&self, id: ContextId) -> Result<&Context, ChannelError> {
        self.contexts
            .get(id.0 as usize)
            .ok_or_else(|| ChannelError::Unknown(format!("context {id}")))
    }

    pub fn channel(&self, id: ChannelId) -> Result<&Channel, ChannelError> {
        self.channels
            .get(id.0 as usize)
            .ok_or_else(|| ChannelError::Unknown(format!("channel {id}")))
    }

    pub fn stream(&self, id: StreamId) -> Result<&StreamHandle, ChannelError> {
        self.streams
            .get(id.0 as usize)
            .ok_or_else(|| ChannelError::Unknown(format!("stream {id}")))
    }

    pub fn tsg(&self, id: TsgId) -> &TimesliceGroup {
        &self.tsgs[id.0 as usize]
    }

    pub fn runlist(&self) -> &[TsgId] {
        &self.runlist
    }

    pub fn graft_report(&self, compute: ContextId, graphics: ContextId) -> Option<&GraftReport> {
        self.grafts.get(&(compute, graphics))
    }

    pub fn graft_reports(&self) -> usize {
        self.grafts.len()
    }

    /// Submission-path micro-ops issued so far (four per submit).
    pub fn micro_ops(&self) -> u64 {
        self.micro_ops
    }

    pub fn events(&self) -> &[Event] {
        &self.log
    }

    pub fn faults(&self) -> &[FaultRecord] {
        &self.faults
    }

    pub fn now(&self) -> f64 {
        self.engine.now
    }

    /// Reads a device memory word through `space`'s page table, bypassing
    /// the TLB (host-side read of a mapped region).
    pub fn read_word(&self, space: SpaceId, va: VirtAddr) -> Option<u64> {
        let (phys, base, _) = self.mmu.walk(space, va).ok()?;
        Some(*self.memory.get(&(phys.id, va.0 - base)).unwrap_or(&0))
    }
}
