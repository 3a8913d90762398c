//! Discrete-event execution engine.
//!
//! The runlist activates one TSG at a time. Inside the active slice the
//! head command of every pending channel runs concurrently; when summed
//! demand on a resource exceeds its capacity all demanding commands slow
//! down by the same factor (processor sharing). Commands are never
//! preempted: at quantum expiry the active TSG stops starting new timed
//! commands and yields once the running ones finish.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelId, ComputeConfig, ContextKind, InFlight, StreamId};
use crate::device::Device;
use crate::error::ChannelError;
use crate::event::{Event, EventKind};
use crate::vm::VirtAddr;

/// Slack used when comparing simulated times and remaining work.
pub const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TsgId(pub u32);

impl fmt::Display for TsgId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tsg#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandKind {
    KernelDispatch,
    GraphicsDraw,
    InitCompute(ComputeConfig),
    SemaphoreWrite { addr: VirtAddr, value: u64 },
    Sleep,
}

impl CommandKind {
    pub fn name(&self) -> &'static str {
        match self {
            CommandKind::KernelDispatch => "kernel",
            CommandKind::GraphicsDraw => "draw",
            CommandKind::InitCompute(_) => "init_compute",
            CommandKind::SemaphoreWrite { .. } => "semaphore",
            CommandKind::Sleep => "sleep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GpuCommand {
    pub kind: CommandKind,
    pub touched_vaddrs: Vec<VirtAddr>,
    pub compute_frac: f64,
    pub graphics_frac: f64,
    pub base_duration: f64,
}

impl GpuCommand {
    pub fn kernel(duration: f64, compute_frac: f64, touched: Vec<VirtAddr>) -> Self {
        Self {
            kind: CommandKind::KernelDispatch,
            touched_vaddrs: touched,
            compute_frac,
            graphics_frac: 0.0,
            base_duration: duration,
        }
    }

    pub fn draw(duration: f64, compute_frac: f64, graphics_frac: f64, touched: Vec<VirtAddr>) -> Self {
        Self {
            kind: CommandKind::GraphicsDraw,
            touched_vaddrs: touched,
            compute_frac,
            graphics_frac,
            base_duration: duration,
        }
    }

    pub fn sleep(duration: f64) -> Self {
        Self {
            kind: CommandKind::Sleep,
            touched_vaddrs: Vec::new(),
            compute_frac: 0.0,
            graphics_frac: 0.0,
            base_duration: duration,
        }
    }

    pub fn semaphore(addr: VirtAddr, value: u64) -> Self {
        Self {
            kind: CommandKind::SemaphoreWrite { addr, value },
            touched_vaddrs: Vec::new(),
            compute_frac: 0.0,
            graphics_frac: 0.0,
            base_duration: 0.0,
        }
    }

    pub fn init_compute(config: ComputeConfig) -> Self {
        Self {
            kind: CommandKind::InitCompute(config),
            touched_vaddrs: Vec::new(),
            compute_frac: 0.0,
            graphics_frac: 0.0,
            base_duration: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.compute_frac) || !unit(self.graphics_frac) {
            return Err(format!("{} fractions must lie in [0, 1]", self.kind.name()));
        }
        if !(self.base_duration >= 0.0 && self.base_duration.is_finite()) {
            return Err(format!("{} duration must be finite and >= 0", self.kind.name()));
        }
        match self.kind {
            CommandKind::KernelDispatch if self.graphics_frac != 0.0 => {
                Err("kernels cannot demand graphics units".into())
            }
            CommandKind::InitCompute(_) | CommandKind::SemaphoreWrite { .. }
                if self.base_duration != 0.0 =>
            {
                Err(format!("{} must have zero duration", self.kind.name()))
            }
            _ => Ok(()),
        }
    }

    fn is_instant(&self) -> bool {
        self.base_duration == 0.0
    }

    fn has_demand(&self) -> bool {
        self.compute_frac > 0.0 || self.graphics_frac > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimesliceGroup {
    pub id: TsgId,
    /// Fixed by channel creation; never reassigned.
    pub channels: Vec<ChannelId>,
    pub quantum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    PageFault,
    ExecutionFault,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FaultRecord {
    pub kind: FaultKind,
    pub channel: ChannelId,
    pub tsg: TsgId,
    pub vaddr: Option<VirtAddr>,
    pub time: f64,
    pub reason: String,
}

/// One executed command. Instant commands have `start == end`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecRecord {
    pub tsg: TsgId,
    pub channel: ChannelId,
    pub stream: Option<StreamId>,
    pub seq: u64,
    pub kind: &'static str,
    pub start: f64,
    pub end: f64,
}

/// A stretch of time during which one TSG held the engine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SliceRecord {
    pub tsg: TsgId,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UtilSegment {
    pub start: f64,
    pub end: f64,
    pub compute: f64,
    pub graphics: f64,
    pub tsg: Option<TsgId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UtilizationSample {
    pub time: f64,
    pub compute_util: f64,
    pub graphics_util: f64,
    pub active_tsg: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct EngineSummary {
    pub makespan: f64,
    /// Capacity-normalized busy time per resource.
    pub compute_busy: f64,
    pub graphics_busy: f64,
    pub faults: usize,
    pub tsg_switches: u64,
}

#[derive(Debug, Clone)]
pub(crate) struct Running {
    pub channel: ChannelId,
    pub tsg: TsgId,
    pub stream: Option<StreamId>,
    pub seq: u64,
    pub cmd: GpuCommand,
    /// Work left, in unstretched duration units.
    pub remaining: f64,
    pub start: f64,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct EngineState {
    pub now: f64,
    pub active: Option<TsgId>,
    pub last_active: Option<TsgId>,
    pub rr_next: usize,
    pub slice_end: f64,
    pub draining: bool,
    pub blocked_until: f64,
    pub running: Vec<Running>,
    pub segments: Vec<UtilSegment>,
    pub slices: Vec<SliceRecord>,
    pub execs: Vec<ExecRecord>,
    pub switches: u64,
}

impl Device {
    pub fn exec_records(&self) -> &[ExecRecord] {
        &self.engine.execs
    }

    /// Completed and open slices; an open slice ends at the current time.
    pub fn slices(&self) -> Vec<SliceRecord> {
        let mut out = self.engine.slices.clone();
        if self.engine.active.is_some() {
            if let Some(last) = out.last_mut() {
                last.end = self.engine.now;
            }
        }
        out
    }

    pub fn util_segments(&self) -> &[UtilSegment] {
        &self.engine.segments
    }

    pub fn active_tsg(&self) -> Option<TsgId> {
        self.engine.active
    }

    pub fn is_idle(&self) -> bool {
        self.engine.running.is_empty() && !self.channels.iter().any(|c| self.runnable(c.id))
    }

    pub fn summary(&self) -> EngineSummary {
        let (mut c, mut g) = (0.0, 0.0);
        for s in &self.engine.segments {
            c += s.compute * (s.end - s.start);
            g += s.graphics * (s.end - s.start);
        }
        EngineSummary {
            makespan: self.engine.now,
            compute_busy: c * self.cfg.compute_capacity,
            graphics_busy: g * self.cfg.graphics_capacity,
            faults: self.faults.len(),
            tsg_switches: self.engine.switches,
        }
    }

    /// Runs until `cond` holds. Fails with `Stalled` if the engine runs
    /// out of work first.
    pub fn run_until(&mut self, cond: impl Fn(&Device) -> bool) -> Result<(), ChannelError> {
        loop {
            if cond(self) {
                return Ok(());
            }
            if !self.step(None) {
                return if cond(self) {
                    Ok(())
                } else {
                    Err(ChannelError::Stalled {
                        time: self.engine.now,
                    })
                };
            }
        }
    }

    /// Advances the clock by `dt`, processing everything due meanwhile.
    /// Models host-side time such as policy inference.
    pub fn run_for(&mut self, dt: f64) {
        let target = self.engine.now + dt.max(0.0);
        while self.engine.now < target - EPS {
            if !self.step(Some(target)) {
                self.advance_to(target);
            }
        }
        self.dispatch();
    }

    pub fn run_until_idle(&mut self) -> EngineSummary {
        while self.step(None) {}
        self.summary()
    }

    fn runnable(&self, ch: ChannelId) -> bool {
        let c = &self.channels[ch.0 as usize];
        c.pending && !c.faulted && c.has_work()
    }

    fn tsg_runnable(&self, tsg: TsgId) -> bool {
        self.tsgs[tsg.0 as usize]
            .channels
            .iter()
            .any(|&c| self.runnable(c))
    }

    /// One event step: settle the current instant, then advance to the
    /// next event (bounded by `horizon`). Returns false when idle.
    fn step(&mut self, horizon: Option<f64>) -> bool {
        self.dispatch();
        if self.engine.active.is_none() {
            return false;
        }
        let e = &self.engine;
        let mut next = if e.blocked_until > e.now + EPS {
            e.blocked_until
        } else {
            let stretch = self.stretch();
            let mut t = if e.draining { f64::INFINITY } else { e.slice_end };
            for r in &e.running {
                let rate = if r.cmd.has_demand() { stretch } else { 1.0 };
                t = t.min(e.now + r.remaining * rate);
            }
            t
        };
        if let Some(h) = horizon {
            next = next.min(h);
        }
        self.advance_to(next);
        self.complete_finished();
        let e = &mut self.engine;
        if let Some(active) = e.active.filter(|_| !e.draining && e.now >= e.slice_end - EPS) {
            let others = self
                .runlist
                .iter()
                .any(|&t| t != active && self.tsg_runnable(t));
            let e = &mut self.engine;
            if others {
                e.draining = true;
            } else {
                let q = self.tsgs[active.0 as usize].quantum;
                while e.slice_end <= e.now + EPS {
                    e.slice_end += q;
                }
            }
        }
        // instant commands behind a completion happen at this instant
        self.dispatch();
        true
    }

    fn stretch(&self) -> f64 {
        let (mut c, mut g) = (0.0, 0.0);
        for r in &self.engine.running {
            c += r.cmd.compute_frac;
            g += r.cmd.graphics_frac;
        }
        (c / self.cfg.compute_capacity)
            .max(g / self.cfg.graphics_capacity)
            .max(1.0)
    }

    fn advance_to(&mut self, t: f64) {
        let now = self.engine.now;
        if t <= now {
            return;
        }
        let dt = t - now;
        let stretch = self.stretch();
        let (mut c, mut g) = (0.0, 0.0);
        let blocked = self.engine.blocked_until > now + EPS;
        for r in &mut self.engine.running {
            if blocked {
                continue;
            }
            if r.cmd.has_demand() {
                r.remaining -= dt / stretch;
                c += r.cmd.compute_frac;
                g += r.cmd.graphics_frac;
            } else {
                r.remaining -= dt;
            }
        }
        let seg = UtilSegment {
            start: now,
            end: t,
            compute: c / (stretch * self.cfg.compute_capacity),
            graphics: g / (stretch * self.cfg.graphics_capacity),
            tsg: self.engine.active,
        };
        match self.engine.segments.last_mut() {
            Some(last)
                if last.end == seg.start
                    && last.compute == seg.compute
                    && last.graphics == seg.graphics
                    && last.tsg == seg.tsg =>
            {
                last.end = seg.end;
            }
            _ => self.engine.segments.push(seg),
        }
        self.engine.now = t;
    }

    fn complete_finished(&mut self) {
        let now = self.engine.now;
        let (done, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut self.engine.running)
            .into_iter()
            .partition(|r| r.remaining <= EPS);
        self.engine.running = rest;
        for r in done {
            self.channels[r.channel.0 as usize].busy = false;
            self.log.push(
                Event::new(now, EventKind::ExecEnd)
                    .channel(r.channel.0, r.tsg.0)
                    .stream(r.stream.map(|s| s.0))
                    .seq(r.seq)
                    .detail(r.cmd.kind.name()),
            );
            self.engine.execs.push(ExecRecord {
                tsg: r.tsg,
                channel: r.channel,
                stream: r.stream,
                seq: r.seq,
                kind: r.cmd.kind.name(),
                start: r.start,
                end: now,
            });
        }
    }

    /// Settles the current instant: activates a TSG if none is active,
    /// runs instant commands, starts timed ones, and yields the TSG when
    /// it has nothing left to run.
    pub(crate) fn dispatch(&mut self) {
        loop {
            if self.engine.active.is_none() && !self.activate_next() {
                return;
            }
            if self.engine.blocked_until > self.engine.now + EPS {
                return;
            }
            let tsg = self.engine.active.unwrap();
            let chans = self.tsgs[tsg.0 as usize].channels.clone();
            for ch in chans {
                self.feed_channel(ch);
            }
            if !self.engine.running.is_empty() {
                return;
            }
            self.deactivate();
        }
    }

    fn activate_next(&mut self) -> bool {
        let n = self.runlist.len();
        for i in 0..n {
            let idx = (self.engine.rr_next + i) % n;
            let tsg = self.runlist[idx];
            if !self.tsg_runnable(tsg) {
                continue;
            }
            let now = self.engine.now;
            let e = &mut self.engine;
            let penalty = match e.last_active {
                Some(prev) if prev != tsg => self.cfg.switch_penalty,
                _ => 0.0,
            };
            if e.last_active.is_some_and(|p| p != tsg) {
                e.switches += 1;
            }
            e.active = Some(tsg);
            e.rr_next = idx;
            e.draining = false;
            e.blocked_until = now + penalty;
            e.slice_end = now + penalty + self.tsgs[tsg.0 as usize].quantum;
            e.slices.push(SliceRecord {
                tsg,
                start: now,
                end: now,
            });
            self.log
                .push(Event::new(now, EventKind::TsgActivate).tsg(tsg.0));
            return true;
        }
        false
    }

    fn deactivate(&mut self) {
        let now = self.engine.now;
        let e = &mut self.engine;
        let Some(tsg) = e.active.take() else {
            return;
        };
        if let Some(s) = e.slices.last_mut() {
            s.end = now;
        }
        e.last_active = Some(tsg);
        e.draining = false;
        e.rr_next += 1;
        self.log.push(Event::new(now, EventKind::TsgIdle).tsg(tsg.0));
    }

    fn feed_channel(&mut self, ch: ChannelId) {
        loop {
            let c = &self.channels[ch.0 as usize];
            if c.faulted || c.busy {
                return;
            }
            if c.current.is_none() {
                if c.fetch >= c.userd.put {
                    self.channels[ch.0 as usize].pending = false;
                    return;
                }
                if !c.pending {
                    return;
                }
                self.fetch(ch);
                continue;
            }
            let cur = c.current.as_ref().unwrap();
            if cur.next >= cur.cmds.len() {
                self.complete_buffer(ch);
                continue;
            }
            let cmd = cur.cmds[cur.next].clone();
            let (seq, stream) = (cur.seq, cur.stream);
            if !cmd.is_instant() && self.engine.draining {
                return;
            }
            if let Err(f) = self.check_command(ch, &cmd) {
                self.raise_fault(f);
                return;
            }
            self.channels[ch.0 as usize].current.as_mut().unwrap().next += 1;
            if cmd.is_instant() {
                self.execute_instant(ch, seq, stream, &cmd);
            } else {
                self.start_command(ch, seq, stream, cmd);
                return;
            }
        }
    }

    fn fetch(&mut self, ch: ChannelId) {
        let c = &mut self.channels[ch.0 as usize];
        let seq = c.fetch;
        let entry = c.ring[(seq % c.capacity()) as usize].expect("fetched slot was written");
        c.fetch += 1;
        let cmds = self
            .cmdbufs
            .get(&(entry.origin, entry.cmdbuf_vaddr))
            .cloned()
            .unwrap_or_default();
        self.channels[ch.0 as usize].current = Some(InFlight {
            seq,
            stream: entry.stream,
            cmds,
            next: 0,
        });
    }

    fn complete_buffer(&mut self, ch: ChannelId) {
        let c = &mut self.channels[ch.0 as usize];
        let cur = c.current.take().unwrap();
        c.userd.get += 1;
        let tsg = c.tsg_id;
        self.log.push(
            Event::new(self.engine.now, EventKind::BufferComplete)
                .channel(ch.0, tsg.0)
                .stream(cur.stream.map(|s| s.0))
                .seq(cur.seq),
        );
    }

    /// Checks the preconditions of `cmd` on channel `ch` and translates
    /// every address it touches through the channel's context.
    fn check_command(&mut self, ch: ChannelId, cmd: &GpuCommand) -> Result<(), FaultRecord> {
        let c = &self.channels[ch.0 as usize];
        let ctx = &self.contexts[c.context_id.0 as usize];
        let space = ctx.address_space;
        let fault = |kind, vaddr, reason: &str| FaultRecord {
            kind,
            channel: ch,
            tsg: c.tsg_id,
            vaddr,
            time: self.engine.now,
            reason: reason.to_string(),
        };
        match cmd.kind {
            CommandKind::KernelDispatch
                if ctx.kind == ContextKind::Graphics && c.compute_config.is_none() =>
            {
                return Err(fault(
                    FaultKind::ExecutionFault,
                    None,
                    "kernel on a channel without compute state",
                ));
            }
            CommandKind::GraphicsDraw if !ctx.fixed_function_ready => {
                return Err(fault(
                    FaultKind::ExecutionFault,
                    None,
                    "draw on a context without fixed-function state",
                ));
            }
            _ => {}
        }
        let mut addrs = cmd.touched_vaddrs.clone();
        if let CommandKind::SemaphoreWrite { addr, .. } = cmd.kind {
            addrs.push(addr);
        }
        let tsg = c.tsg_id;
        let now = self.engine.now;
        for va in addrs {
            if let Err(pf) = self.mmu.translate(space, va) {
                return Err(FaultRecord {
                    kind: FaultKind::PageFault,
                    channel: ch,
                    tsg,
                    vaddr: Some(va),
                    time: now,
                    reason: format!("no translation at level {}", pf.level),
                });
            }
        }
        Ok(())
    }

    fn raise_fault(&mut self, f: FaultRecord) {
        let c = &mut self.channels[f.channel.0 as usize];
        c.faulted = true;
        let stream = c.current.as_ref().and_then(|b| b.stream);
        let mut ev = Event::new(f.time, EventKind::Fault)
            .channel(f.channel.0, f.tsg.0)
            .stream(stream.map(|s| s.0))
            .detail(match f.kind {
                FaultKind::PageFault => "page_fault",
                FaultKind::ExecutionFault => "execution_fault",
            });
        if let Some(va) = f.vaddr {
            ev = ev.vaddr(va.0);
        }
        self.log.push(ev);
        self.faults.push(f);
    }

    fn execute_instant(
        &mut self,
        ch: ChannelId,
        seq: u64,
        stream: Option<StreamId>,
        cmd: &GpuCommand,
    ) {
        let now = self.engine.now;
        let c = &self.channels[ch.0 as usize];
        let tsg = c.tsg_id;
        let space = self.contexts[c.context_id.0 as usize].address_space;
        match cmd.kind {
            CommandKind::SemaphoreWrite { addr, value } => {
                let tr = self
                    .mmu
                    .translate(space, addr)
                    .expect("checked before execution");
                self.memory.insert((tr.phys.id, tr.offset), value);
                self.log.push(
                    Event::new(now, EventKind::Semaphore)
                        .channel(ch.0, tsg.0)
                        .stream(stream.map(|s| s.0))
                        .seq(seq)
                        .value(value)
                        .vaddr(addr.0),
                );
            }
            CommandKind::InitCompute(config) => {
                let c = &mut self.channels[ch.0 as usize];
                c.compute_config = Some(config);
                if c.bootstrap_pending == Some(config) {
                    c.bootstrap_pending = None;
                }
                self.log.push(
                    Event::new(now, EventKind::InitCompute)
                        .channel(ch.0, tsg.0)
                        .seq(seq)
                        .value(config.local_memory_bytes),
                );
            }
            _ => {}
        }
        self.engine.execs.push(ExecRecord {
            tsg,
            channel: ch,
            stream,
            seq,
            kind: cmd.kind.name(),
            start: now,
            end: now,
        });
    }

    fn start_command(&mut self, ch: ChannelId, seq: u64, stream: Option<StreamId>, cmd: GpuCommand) {
        let now = self.engine.now;
        let c = &mut self.channels[ch.0 as usize];
        c.busy = true;
        let tsg = c.tsg_id;
        self.log.push(
            Event::new(now, EventKind::ExecStart)
                .channel(ch.0, tsg.0)
                .stream(stream.map(|s| s.0))
                .seq(seq)
                .detail(cmd.kind.name()),
        );
        let remaining = cmd.base_duration;
        let run = Running {
            channel: ch,
            tsg,
            stream,
            seq,
            cmd,
            remaining,
            start: now,
        };
        let at = self
            .engine
            .running
            .partition_point(|r| r.channel < ch);
        self.engine.running.insert(at, run);
    }

    /// Per-interval averages over `[0, until)`.
    pub fn sample_utilization(&self, interval: f64, until: f64) -> Vec<UtilizationSample> {
        assert!(interval > 0.0, "sampling interval must be positive");
        let n = (until / interval - EPS).ceil().max(0.0) as usize;
        let segs = &self.engine.segments;
        let mut out = Vec::with_capacity(n);
        let mut k = 0;
        for i in 0..n {
            let lo = i as f64 * interval;
            let hi = ((i + 1) as f64 * interval).min(until);
            while k < segs.len() && segs[k].end <= lo {
                k += 1;
            }
            let (mut c, mut g) = (0.0, 0.0);
            let mut share: Vec<(TsgId, f64)> = Vec::new();
            let mut j = k;
            while j < segs.len() && segs[j].start < hi {
                let s = &segs[j];
                let w = s.end.min(hi) - s.start.max(lo);
                if w > 0.0 {
                    c += s.compute * w;
                    g += s.graphics * w;
                    if let Some(t) = s.tsg {
                        match share.iter_mut().find(|(id, _)| *id == t) {
                            Some(e) => e.1 += w,
                            None => share.push((t, w)),
                        }
                    }
                }
                j += 1;
            }
            let width = hi - lo;
            let active = share
                .iter()
                .fold(None::<(TsgId, f64)>, |best, &(t, w)| match best {
                    Some((_, bw)) if bw >= w => best,
                    _ => Some((t, w)),
                })
                .map(|(t, _)| t.0);
            out.push(UtilizationSample {
                time: lo,
                compute_util: c / width,
                graphics_util: g / width,
                active_tsg: active,
            });
        }
        out
    }
}
