//! Contexts, channels and streams: the submission side of the device.
//!
//! A stream submits through whatever channel its `channel_ref` names.
//! Binding swaps that reference (together with the doorbell token) to a
//! hidden forwarding channel of a graphics context, so later submissions
//! land in the graphics TSG through exactly the same code path.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::device::Device;
use crate::engine::{GpuCommand, TimesliceGroup, TsgId};
use crate::error::{ChannelError, VmError};
use crate::event::{Event, EventKind};
use crate::vm::{SizeClass, SpaceId, VirtAddr};

macro_rules! id_type {
    ($name:ident, $tag:literal) => {
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($tag, "#{}"), self.0)
            }
        }
    };
}

id_type!(ContextId, "ctx");
id_type!(ChannelId, "ch");
id_type!(StreamId, "stream");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DoorbellToken(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContextKind {
    Compute,
    Graphics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpSchedMode {
    #[default]
    Greedy,
    RoundRobin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ComputeConfig {
    /// Per-lane scratch size.
    pub local_memory_bytes: u64,
    pub warp_sched_mode: WarpSchedMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GpFifoEntry {
    pub cmdbuf_vaddr: VirtAddr,
    pub length: u32,
    /// Space the buffer was written into; the fetch reads it from there.
    pub origin: SpaceId,
    pub stream: Option<StreamId>,
}

/// Free-running GET/PUT cursors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct UserD {
    pub get: u64,
    pub put: u64,
}

/// Buffer the engine is currently working through on one channel.
#[derive(Debug, Clone)]
pub(crate) struct InFlight {
    pub seq: u64,
    pub stream: Option<StreamId>,
    pub cmds: Vec<GpuCommand>,
    pub next: usize,
}

#[derive(Debug, Clone)]
pub struct Channel {
    pub(crate) id: ChannelId,
    pub(crate) ring: Vec<Option<GpFifoEntry>>,
    pub(crate) userd: UserD,
    pub(crate) token: DoorbellToken,
    pub(crate) context_id: ContextId,
    pub(crate) tsg_id: TsgId,
    pub(crate) compute_config: Option<ComputeConfig>,
    pub(crate) visible_to_app: bool,
    pub(crate) pending: bool,
    // engine-side state
    pub(crate) fetch: u64,
    pub(crate) current: Option<InFlight>,
    pub(crate) busy: bool,
    pub(crate) faulted: bool,
    pub(crate) bootstrap_pending: Option<ComputeConfig>,
}

impl Channel {
    pub fn id(&self) -> ChannelId {
        self.id
    }

    pub fn userd(&self) -> UserD {
        self.userd
    }

    pub fn token(&self) -> DoorbellToken {
        self.token
    }

    pub fn context_id(&self) -> ContextId {
        self.context_id
    }

    pub fn tsg_id(&self) -> TsgId {
        self.tsg_id
    }

    pub fn compute_config(&self) -> Option<ComputeConfig> {
        self.compute_config
    }

    pub fn visible_to_app(&self) -> bool {
        self.visible_to_app
    }

    pub fn pending(&self) -> bool {
        self.pending
    }

    pub fn faulted(&self) -> bool {
        self.faulted
    }

    pub fn capacity(&self) -> u64 {
        self.ring.len() as u64
    }

    /// Entries submitted but not yet completed, oldest first.
    pub fn outstanding(&self) -> Vec<GpFifoEntry> {
        (self.userd.get..self.userd.put)
            .filter_map(|i| self.ring[(i % self.capacity()) as usize])
            .collect()
    }

    pub(crate) fn has_work(&self) -> bool {
        self.current.is_some() || self.fetch < self.userd.put
    }
}

/// Ring of fixed-size command-buffer slots mapped in one address space.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Pushbuffer {
    pub base: VirtAddr,
    pub slots: u64,
    pub slot_bytes: u64,
    pub cursor: u64,
}

impl Pushbuffer {
    fn next_slot(&mut self) -> VirtAddr {
        let va = self.base + (self.cursor % self.slots) * self.slot_bytes;
        self.cursor += 1;
        va
    }
}

#[derive(Debug, Clone)]
pub struct Context {
    pub(crate) id: ContextId,
    pub(crate) kind: ContextKind,
    pub(crate) address_space: SpaceId,
    pub(crate) tsg_id: TsgId,
    pub(crate) channels: Vec<ChannelId>,
    pub(crate) fixed_function_ready: bool,
    pub(crate) compute_config: ComputeConfig,
    pub(crate) default_channel: ChannelId,
    pub(crate) default_claimed: bool,
    pub(crate) forwarding: Vec<ChannelId>,
    pub(crate) pool: BTreeSet<ChannelId>,
    pub(crate) control_pb: Pushbuffer,
}

impl Context {
    pub fn id(&self) -> ContextId {
        self.id
    }

    pub fn kind(&self) -> ContextKind {
        self.kind
    }

    pub fn address_space(&self) -> SpaceId {
        self.address_space
    }

    pub fn tsg_id(&self) -> TsgId {
        self.tsg_id
    }

    pub fn channels(&self) -> &[ChannelId] {
        &self.channels
    }

    pub fn fixed_function_ready(&self) -> bool {
        self.fixed_function_ready
    }

    pub fn compute_config(&self) -> ComputeConfig {
        self.compute_config
    }

    pub fn default_channel(&self) -> ChannelId {
        self.default_channel
    }

    pub fn forwarding_channels(&self) -> &[ChannelId] {
        &self.forwarding
    }

    /// Forwarding channels not currently bound to a stream.
    pub fn free_pool(&self) -> &BTreeSet<ChannelId> {
        &self.pool
    }
}

/// The submission state a stream carries; saved on bind, restored on unbind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Snapshot {
    pub ring_ref: ChannelId,
    pub userd: UserD,
    pub token: DoorbellToken,
}

#[derive(Debug, Clone)]
pub struct StreamHandle {
    pub(crate) id: StreamId,
    pub(crate) context: ContextId,
    pub(crate) channel_ref: ChannelId,
    pub(crate) token: DoorbellToken,
    pub(crate) saved_snapshot: Option<Snapshot>,
    pub(crate) sync_region: VirtAddr,
    pub(crate) next_semaphore_value: u64,
    pub(crate) pushbuffer: Pushbuffer,
}

impl StreamHandle {
    pub fn id(&self) -> StreamId {
        self.id
    }

    pub fn context(&self) -> ContextId {
        self.context
    }

    pub fn channel_ref(&self) -> ChannelId {
        self.channel_ref
    }

    pub fn token(&self) -> DoorbellToken {
        self.token
    }

    pub fn saved_snapshot(&self) -> Option<Snapshot> {
        self.saved_snapshot
    }

    pub fn is_bound(&self) -> bool {
        self.saved_snapshot.is_some()
    }

    pub fn sync_region(&self) -> VirtAddr {
        self.sync_region
    }

    /// Value the most recent submission will write on completion.
    pub fn last_issued(&self) -> u64 {
        self.next_semaphore_value - 1
    }
}

impl Device {
    /// Creates a context with its own TSG, address space and one default
    /// channel.
    pub fn create_context(&mut self, kind: ContextKind) -> Result<ContextId, ChannelError> {
        let id = ContextId(self.contexts.len() as u32);
        let tsg_id = TsgId(self.tsgs.len() as u32);
        self.tsgs.push(TimesliceGroup {
            id: tsg_id,
            channels: Vec::new(),
            quantum: self.cfg.quantum,
        });
        self.runlist.push(tsg_id);
        let policy = match kind {
            ContextKind::Compute => self.mmu.high_range(),
            ContextKind::Graphics => self.mmu.low_range(),
        };
        let space = self.mmu.create_space(policy);
        let control_pb = self.map_pushbuffer(space)?;
        self.contexts.push(Context {
            id,
            kind,
            address_space: space,
            tsg_id,
            channels: Vec::new(),
            fixed_function_ready: kind == ContextKind::Graphics,
            compute_config: self.cfg.default_compute,
            default_channel: ChannelId(u32::MAX),
            default_claimed: false,
            forwarding: Vec::new(),
            pool: BTreeSet::new(),
            control_pb,
        });
        let ch = self.new_channel(id, true);
        self.contexts[id.0 as usize].default_channel = ch;
        Ok(id)
    }

    fn new_channel(&mut self, ctx: ContextId, visible: bool) -> ChannelId {
        let id = ChannelId(self.channels.len() as u32);
        let tsg_id = self.contexts[ctx.0 as usize].tsg_id;
        let token = DoorbellToken(0xd00b_0000 + u64::from(id.0));
        self.channels.push(Channel {
            id,
            ring: vec![None; self.cfg.ring_capacity as usize],
            userd: UserD::default(),
            token,
            context_id: ctx,
            tsg_id,
            compute_config: None,
            visible_to_app: visible,
            pending: false,
            fetch: 0,
            current: None,
            busy: false,
            faulted: false,
            bootstrap_pending: None,
        });
        self.tokens.insert(token, id);
        self.contexts[ctx.0 as usize].channels.push(id);
        self.tsgs[tsg_id.0 as usize].channels.push(id);
        id
    }

    fn map_pushbuffer(&mut self, space: SpaceId) -> Result<Pushbuffer, VmError> {
        let page = self.cfg.geometry.page_bytes(SizeClass::Small);
        let slots = u64::from(self.cfg.ring_capacity);
        let bytes = slots * self.cfg.pushbuffer_slot_bytes;
        let base = self.map_fresh(space, bytes.div_ceil(page), SizeClass::Small)?;
        Ok(Pushbuffer {
            base,
            slots,
            slot_bytes: self.cfg.pushbuffer_slot_bytes,
            cursor: 0,
        })
    }

    /// Allocates and backs `n_pages` fresh pages in `space`.
    pub fn map_fresh(
        &mut self,
        space: SpaceId,
        n_pages: u64,
        size: SizeClass,
    ) -> Result<VirtAddr, VmError> {
        let va = self.mmu.allocate(space, n_pages, size, None)?;
        let pages: Vec<_> = (0..n_pages).map(|_| self.mmu.alloc_phys(size)).collect();
        self.mmu.map_range(space, va, &pages)?;
        Ok(va)
    }

    /// Adds hidden forwarding channels to a graphics context, up to the
    /// hardware queue limit minus the one app-visible channel.
    pub fn provision_forwarding_pool(
        &mut self,
        graphics: ContextId,
        requested: u32,
    ) -> Result<Vec<ChannelId>, ChannelError> {
        if self.context(graphics)?.kind != ContextKind::Graphics {
            return Err(ChannelError::WrongContextKind { ctx: graphics });
        }
        let want = requested.min(self.cfg.hw_max_queues - 1) as usize;
        while self.contexts[graphics.0 as usize].forwarding.len() < want {
            let ch = self.new_channel(graphics, false);
            let ctx = &mut self.contexts[graphics.0 as usize];
            ctx.forwarding.push(ch);
            ctx.pool.insert(ch);
        }
        Ok(self.contexts[graphics.0 as usize].forwarding.clone())
    }

    /// Creates a stream on `ctx`. The first stream takes over the default
    /// channel; later ones get channels of their own in the same TSG.
    pub fn create_stream(&mut self, ctx: ContextId) -> Result<StreamId, ChannelError> {
        let c = self.context(ctx)?;
        let space = c.address_space;
        let channel = if c.default_claimed {
            self.new_channel(ctx, true)
        } else {
            self.contexts[ctx.0 as usize].default_claimed = true;
            self.contexts[ctx.0 as usize].default_channel
        };
        let pushbuffer = self.map_pushbuffer(space)?;
        let sync_region = self.map_fresh(space, 1, SizeClass::Small)?;
        let id = StreamId(self.streams.len() as u32);
        self.streams.push(StreamHandle {
            id,
            context: ctx,
            channel_ref: channel,
            token: self.channels[channel.0 as usize].token,
            saved_snapshot: None,
            sync_region,
            next_semaphore_value: 1,
            pushbuffer,
        });
        Ok(id)
    }

    /// Live submission state of a stream, in the shape of a [`Snapshot`].
    pub fn submission_state(&self, stream: StreamId) -> Result<Snapshot, ChannelError> {
        let s = self.stream(stream)?;
        Ok(Snapshot {
            ring_ref: s.channel_ref,
            userd: self.channels[s.channel_ref.0 as usize].userd,
            token: s.token,
        })
    }

    /// Last value observed at the stream's sync region, read through the
    /// stream's own address space.
    pub fn semaphore_value(&self, stream: StreamId) -> u64 {
        let s = &self.streams[stream.0 as usize];
        let space = self.contexts[s.context.0 as usize].address_space;
        self.read_word(space, s.sync_region).unwrap_or(0)
    }

    /// Submits one command buffer on `stream` and returns the semaphore
    /// value its completion will write.
    pub fn submit(
        &mut self,
        stream: StreamId,
        commands: Vec<GpuCommand>,
    ) -> Result<u64, ChannelError> {
        for c in &commands {
            c.validate().map_err(ChannelError::InvalidCommand)?;
        }
        let s = self.stream(stream)?;
        let ch = s.channel_ref;
        let token = s.token;
        let origin = self.contexts[s.context.0 as usize].address_space;
        let chan = &self.channels[ch.0 as usize];
        if chan.userd.put - chan.userd.get >= chan.capacity() {
            return Err(ChannelError::RingFull(ch));
        }

        let s = &mut self.streams[stream.0 as usize];
        let value = s.next_semaphore_value;
        s.next_semaphore_value += 1;
        let mut cmds = commands;
        cmds.push(GpuCommand::semaphore(s.sync_region, value));

        // 1: write the buffer into context memory
        let va = s.pushbuffer.next_slot();
        let length = cmds.len() as u32;
        self.cmdbufs.insert((origin, va), cmds);
        // 2: append the GPFIFO entry
        let chan = &mut self.channels[ch.0 as usize];
        let slot = (chan.userd.put % chan.capacity()) as usize;
        chan.ring[slot] = Some(GpFifoEntry {
            cmdbuf_vaddr: va,
            length,
            origin,
            stream: Some(stream),
        });
        // 3: advance PUT
        chan.userd.put += 1;
        let seq = chan.userd.put - 1;
        let tsg = chan.tsg_id;
        self.micro_ops += 3;
        self.log.push(
            Event::new(self.engine.now, EventKind::Submit)
                .channel(ch.0, tsg.0)
                .stream(Some(stream.0))
                .seq(seq)
                .value(value)
                .vaddr(va.0),
        );
        // 4: ring the doorbell
        self.ring_doorbell(token, Some(stream));
        Ok(value)
    }

    fn ring_doorbell(&mut self, token: DoorbellToken, stream: Option<StreamId>) {
        let Some(&ch) = self.tokens.get(&token) else {
            return;
        };
        let chan = &mut self.channels[ch.0 as usize];
        chan.pending = true;
        let tsg = chan.tsg_id;
        self.micro_ops += 1;
        self.log.push(
            Event::new(self.engine.now, EventKind::Doorbell)
                .channel(ch.0, tsg.0)
                .stream(stream.map(|s| s.0)),
        );
    }

    /// Runs the engine until every buffer issued on `stream` has signalled.
    pub fn drain(&mut self, stream: StreamId) -> Result<(), ChannelError> {
        let target = self.stream(stream)?.last_issued();
        let ch = self.streams[stream.0 as usize].channel_ref;
        self.run_until(|d| {
            d.semaphore_value(stream) >= target || d.channels[ch.0 as usize].faulted
        })?;
        if self.semaphore_value(stream) < target {
            return Err(ChannelError::Stalled {
                time: self.engine.now,
            });
        }
        Ok(())
    }

    /// Redirects `stream` onto a forwarding channel of `graphics`.
    pub fn bind(&mut self, stream: StreamId, graphics: ContextId) -> Result<(), ChannelError> {
        let s = self.stream(stream)?;
        if s.is_bound() {
            return Err(ChannelError::AlreadyBound(stream));
        }
        let origin = s.context;
        if self.context(origin)?.kind != ContextKind::Compute {
            return Err(ChannelError::WrongContextKind { ctx: origin });
        }
        let g = self.context(graphics)?;
        if g.kind != ContextKind::Graphics {
            return Err(ChannelError::WrongContextKind { ctx: graphics });
        }
        let Some(&fwd) = g.pool.first() else {
            return Err(ChannelError::PoolExhausted(graphics));
        };

        self.drain(stream)?;
        self.contexts[graphics.0 as usize].pool.remove(&fwd);

        let needed = self.contexts[origin.0 as usize].compute_config;
        if self.knobs.bootstrap_on_bind && !self.config_satisfies(fwd, needed) {
            self.bootstrap(fwd, needed, "initial")?;
        }
        if self.knobs.graft_on_bind && !self.grafts.contains_key(&(origin, graphics)) {
            let src = self.contexts[origin.0 as usize].address_space;
            let dst = self.contexts[graphics.0 as usize].address_space;
            let report = self.mmu.graft(src, dst)?;
            self.grafts.insert((origin, graphics), report);
        }

        let snap = self.submission_state(stream)?;
        let token = self.channels[fwd.0 as usize].token;
        let s = &mut self.streams[stream.0 as usize];
        s.saved_snapshot = Some(snap);
        s.channel_ref = fwd;
        s.token = token;
        let tsg = self.channels[fwd.0 as usize].tsg_id;
        self.log.push(
            Event::new(self.engine.now, EventKind::Bind)
                .channel(fwd.0, tsg.0)
                .stream(Some(stream.0)),
        );
        Ok(())
    }

    /// Drains a bound stream, restores its saved submission state and
    /// returns the forwarding channel to its pool.
    pub fn unbind(&mut self, stream: StreamId) -> Result<(), ChannelError> {
        let snap = self
            .stream(stream)?
            .saved_snapshot
            .ok_or(ChannelError::NotBound(stream))?;
        self.drain(stream)?;
        let s = &mut self.streams[stream.0 as usize];
        let fwd = s.channel_ref;
        s.channel_ref = snap.ring_ref;
        s.token = snap.token;
        s.saved_snapshot = None;
        let fch = &self.channels[fwd.0 as usize];
        let (ctx, tsg) = (fch.context_id, fch.tsg_id);
        self.contexts[ctx.0 as usize].pool.insert(fwd);
        self.log.push(
            Event::new(self.engine.now, EventKind::Unbind)
                .channel(fwd.0, tsg.0)
                .stream(Some(stream.0)),
        );
        Ok(())
    }

    fn config_satisfies(&self, ch: ChannelId, needed: ComputeConfig) -> bool {
        let c = &self.channels[ch.0 as usize];
        let have = c.bootstrap_pending.or(c.compute_config);
        have.is_some_and(|h| {
            h.local_memory_bytes >= needed.local_memory_bytes
                && h.warp_sched_mode == needed.warp_sched_mode
        })
    }

    /// Queues an InitCompute as the channel's next command. The channel
    /// holds `config` once the engine has executed it.
    pub fn bootstrap(
        &mut self,
        channel: ChannelId,
        config: ComputeConfig,
        reason: &str,
    ) -> Result<(), ChannelError> {
        let chan = self.channel(channel)?;
        let ctx = chan.context_id;
        if self.contexts[ctx.0 as usize].kind != ContextKind::Graphics {
            return Err(ChannelError::WrongContextKind { ctx });
        }
        if chan.userd.put - chan.userd.get >= chan.capacity() {
            return Err(ChannelError::RingFull(channel));
        }
        let space = self.contexts[ctx.0 as usize].address_space;
        let va = self.contexts[ctx.0 as usize].control_pb.next_slot();
        self.cmdbufs
            .insert((space, va), vec![GpuCommand::init_compute(config)]);
        let chan = &mut self.channels[channel.0 as usize];
        let slot = (chan.userd.put % chan.capacity()) as usize;
        chan.ring[slot] = Some(GpFifoEntry {
            cmdbuf_vaddr: va,
            length: 1,
            origin: space,
            stream: None,
        });
        chan.userd.put += 1;
        chan.pending = true;
        chan.bootstrap_pending = Some(config);
        let tsg = chan.tsg_id;
        self.log.push(
            Event::new(self.engine.now, EventKind::Bootstrap)
                .channel(channel.0, tsg.0)
                .detail(reason),
        );
        Ok(())
    }

    /// Updates the scratch size of a compute context. Growing it re-submits
    /// the initialization to every forwarding channel currently bound to a
    /// stream of that context.
    pub fn set_local_memory(&mut self, ctx: ContextId, bytes: u64) -> Result<usize, ChannelError> {
        let c = self.context(ctx)?;
        if c.kind != ContextKind::Compute {
            return Err(ChannelError::WrongContextKind { ctx });
        }
        let grows = bytes > c.compute_config.local_memory_bytes;
        self.contexts[ctx.0 as usize].compute_config.local_memory_bytes = bytes;
        if !grows {
            return Ok(0);
        }
        let config = self.contexts[ctx.0 as usize].compute_config;
        let bound: Vec<ChannelId> = self
            .streams
            .iter()
            .filter(|s| s.context == ctx && s.is_bound())
            .map(|s| s.channel_ref)
            .collect();
        for &ch in &bound {
            self.bootstrap(ch, config, "resubmit")?;
        }
        Ok(bound.len())
    }

    /// Clears a channel fault and discards the work queued behind it.
    pub fn reset_channel(&mut self, channel: ChannelId) -> Result<(), ChannelError> {
        self.channel(channel)?;
        let c = &mut self.channels[channel.0 as usize];
        c.faulted = false;
        c.current = None;
        c.busy = false;
        c.fetch = c.userd.put;
        c.userd.get = c.userd.put;
        c.pending = false;
        c.bootstrap_pending = None;
        self.engine.running.retain(|r| r.channel != channel);
        Ok(())
    }
}
