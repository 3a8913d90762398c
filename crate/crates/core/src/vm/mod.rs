//! GPU virtual memory: per-context radix page tables, the VA allocator,
//! page-directory grafting and subscriber-based consistency propagation.
//!
//! All tables of one simulated device live in a single node arena, so a
//! grafted PDE in one space literally points at the other space's subtree.
//! PTE-level changes below a grafted PDE are therefore visible to both
//! spaces without any extra writes; only PDE insertions and removals have
//! to be replayed into subscribers.

mod geometry;
mod graft;
mod oracle;
mod table;
mod tlb;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::VmError;

pub use geometry::{PageGeometry, VaLayout, DEFAULT_HIGH_BASE, DEFAULT_LOW_BASE};
pub use oracle::{EntryDump, NodeDump, TableDump};
pub use table::{NodeId, PageEntry, PageTableNode};
pub use tlb::Tlb;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VirtAddr(pub u64);

impl fmt::Display for VirtAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

impl std::ops::Add<u64> for VirtAddr {
    type Output = VirtAddr;
    fn add(self, rhs: u64) -> VirtAddr {
        VirtAddr(self.0 + rhs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    /// 4 KiB under the default geometry.
    Small,
    /// 2 MiB under the default geometry.
    Big,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct PhysPageId {
    pub id: u64,
    pub size: SizeClass,
}

/// Carried with each PTE; never enforced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Perms {
    pub writable: bool,
}

impl Default for Perms {
    fn default() -> Self {
        Self { writable: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct SpaceId(pub u32);

impl fmt::Display for SpaceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "space#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AllocPolicy {
    HighRange(u64),
    LowRange(u64),
}

impl AllocPolicy {
    pub fn base(&self) -> u64 {
        match *self {
            AllocPolicy::HighRange(b) | AllocPolicy::LowRange(b) => b,
        }
    }
}

/// A walk that stopped before reaching a leaf.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("page fault at {vaddr} (walk stopped at level {level})")]
pub struct PageFault {
    pub vaddr: VirtAddr,
    pub level: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Translation {
    pub phys: PhysPageId,
    pub offset: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct GraftReport {
    pub pdes_copied: u64,
    pub max_depth_descended: u64,
    /// Allocator fallbacks in either space since the pair was last grafted.
    pub conflicts_resolved: u64,
    /// Entries written through the copy engine, PDEs and leaves alike.
    pub entry_writes: u64,
    pub tlb_invalidations: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct CopyEngineLog {
    pub reads: u64,
    pub writes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct SpaceCounters {
    pub pdes_created: u64,
    pub pdes_removed: u64,
    /// Entry writes this space received as a graft subscriber.
    pub subscriber_writes: u64,
    pub tlb_invalidations: u64,
    pub conflicts_resolved: u64,
    /// Propagated changes that hit a leaf and were skipped.
    pub propagation_conflicts: u64,
}

#[derive(Debug, Clone)]
pub struct AddressSpace {
    id: SpaceId,
    pdb: NodeId,
    policy: AllocPolicy,
    subscribers: BTreeSet<SpaceId>,
    sources: BTreeSet<SpaceId>,
    tlb: Tlb,
    alloc_cursor: u64,
    reservations: BTreeMap<u64, u64>,
    /// Leaves installed through this space, page base -> end.
    own_leaves: BTreeMap<u64, u64>,
    counters: SpaceCounters,
}

impl AddressSpace {
    pub fn id(&self) -> SpaceId {
        self.id
    }
    pub fn pdb(&self) -> NodeId {
        self.pdb
    }
    pub fn policy(&self) -> AllocPolicy {
        self.policy
    }
    pub fn subscribers(&self) -> &BTreeSet<SpaceId> {
        &self.subscribers
    }
    pub fn counters(&self) -> SpaceCounters {
        self.counters
    }
    pub fn tlb(&self) -> &Tlb {
        &self.tlb
    }
    pub fn alloc_cursor(&self) -> VirtAddr {
        VirtAddr(self.alloc_cursor)
    }
    /// Pages mapped through this space (not through a graft).
    pub fn own_pages(&self) -> impl Iterator<Item = (VirtAddr, u64)> + '_ {
        self.own_leaves.iter().map(|(&s, &e)| (VirtAddr(s), e - s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StructuralChange {
    PdeInserted(NodeId),
    PdeRemoved(NodeId),
}

/// The page-table manager of one simulated device.
#[derive(Debug, Clone)]
pub struct Mmu {
    geometry: PageGeometry,
    layout: VaLayout,
    nodes: table::NodeArena,
    spaces: Vec<AddressSpace>,
    copy_engine: CopyEngineLog,
    next_phys: u64,
    tlb_propagation: bool,
    reported_conflicts: BTreeMap<(SpaceId, SpaceId), u64>,
}

fn align_up(v: u64, align: u64) -> Option<u64> {
    v.checked_add(align - 1).map(|x| x & !(align - 1))
}

impl Mmu {
    pub fn new(geometry: PageGeometry, layout: VaLayout) -> Result<Self, VmError> {
        geometry.validate()?;
        layout.validate(&geometry)?;
        Ok(Self {
            geometry,
            layout,
            nodes: table::NodeArena::new(geometry.fanout()),
            spaces: Vec::new(),
            copy_engine: CopyEngineLog::default(),
            next_phys: 0,
            tlb_propagation: true,
            reported_conflicts: BTreeMap::new(),
        })
    }

    pub fn geometry(&self) -> &PageGeometry {
        &self.geometry
    }

    pub fn layout(&self) -> &VaLayout {
        &self.layout
    }

    pub fn copy_engine(&self) -> CopyEngineLog {
        self.copy_engine
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, id: NodeId) -> &PageTableNode {
        self.nodes.get(id)
    }

    /// Test knob: when off, invalidations stay local to the issuing space.
    pub fn set_tlb_propagation(&mut self, enabled: bool) {
        self.tlb_propagation = enabled;
    }

    pub fn create_space(&mut self, policy: AllocPolicy) -> SpaceId {
        let id = SpaceId(self.spaces.len() as u32);
        let pdb = self.nodes.alloc(0);
        self.spaces.push(AddressSpace {
            id,
            pdb,
            policy,
            subscribers: BTreeSet::new(),
            sources: BTreeSet::new(),
            tlb: Tlb::default(),
            alloc_cursor: policy.base(),
            reservations: BTreeMap::new(),
            own_leaves: BTreeMap::new(),
            counters: SpaceCounters::default(),
        });
        id
    }

    pub fn high_range(&self) -> AllocPolicy {
        AllocPolicy::HighRange(self.layout.high_base)
    }

    pub fn low_range(&self) -> AllocPolicy {
        AllocPolicy::LowRange(self.layout.low_base)
    }

    pub fn space(&self, id: SpaceId) -> Result<&AddressSpace, VmError> {
        self.spaces
            .get(id.0 as usize)
            .ok_or(VmError::UnknownSpace(id))
    }

    fn space_mut(&mut self, id: SpaceId) -> Result<&mut AddressSpace, VmError> {
        self.spaces
            .get_mut(id.0 as usize)
            .ok_or(VmError::UnknownSpace(id))
    }

    pub fn spaces(&self) -> impl Iterator<Item = &AddressSpace> {
        self.spaces.iter()
    }

    pub fn alloc_phys(&mut self, size: SizeClass) -> PhysPageId {
        let id = self.next_phys;
        self.next_phys += 1;
        PhysPageId { id, size }
    }

    fn region(&self, policy: AllocPolicy) -> (u64, u64) {
        match policy {
            AllocPolicy::HighRange(b) => (b, self.layout.limit()),
            AllocPolicy::LowRange(b) => (b, self.layout.high_base.max(b)),
        }
    }

    /// Every space connected to `id` through graft edges, `id` included.
    pub fn graft_component(&self, id: SpaceId) -> Vec<SpaceId> {
        let mut seen = BTreeSet::from([id]);
        let mut queue = VecDeque::from([id]);
        while let Some(s) = queue.pop_front() {
            let sp = &self.spaces[s.0 as usize];
            for &n in sp.subscribers.iter().chain(sp.sources.iter()) {
                if seen.insert(n) {
                    queue.push_back(n);
                }
            }
        }
        seen.into_iter().collect()
    }

    /// Subscribers reachable from `id`, breadth first, `id` excluded.
    pub fn transitive_subscribers(&self, id: SpaceId) -> Vec<SpaceId> {
        let mut seen = BTreeSet::from([id]);
        let mut order = Vec::new();
        let mut queue = VecDeque::from([id]);
        while let Some(s) = queue.pop_front() {
            for &n in &self.spaces[s.0 as usize].subscribers {
                if seen.insert(n) {
                    order.push(n);
                    queue.push_back(n);
                }
            }
        }
        order
    }

    fn first_conflict(&self, component: &[SpaceId], start: u64, end: u64) -> Option<u64> {
        let mut worst: Option<u64> = None;
        for s in component {
            let sp = &self.spaces[s.0 as usize];
            for map in [&sp.reservations, &sp.own_leaves] {
                if let Some((_, &e)) = map.range(..end).next_back() {
                    if e > start {
                        worst = Some(worst.map_or(e, |w| w.max(e)));
                    }
                }
            }
        }
        worst
    }

    /// Reserves `n_pages` pages of `size`, disjoint from every reservation
    /// and own mapping in the graft component of `space`.
    ///
    /// A conflicting hint is replaced by the first free address above it
    /// and counted in `conflicts_resolved`.
    pub fn allocate(
        &mut self,
        space: SpaceId,
        n_pages: u64,
        size: SizeClass,
        hint: Option<VirtAddr>,
    ) -> Result<VirtAddr, VmError> {
        if n_pages == 0 {
            return Err(VmError::EmptyRequest);
        }
        let sp = self.space(space)?;
        let exhausted = VmError::AddressSpaceExhausted { space, n_pages };
        let page = self.geometry.page_bytes(size);
        let len = n_pages.checked_mul(page).ok_or(exhausted.clone())?;
        let (rstart, rend) = self.region(sp.policy);
        let (mut cand, limit) = match hint {
            Some(h) => {
                if h.0 % page != 0 {
                    return Err(VmError::Misaligned(h));
                }
                let limit = if h.0 >= rstart && h.0 < rend {
                    rend
                } else {
                    self.layout.limit()
                };
                (h.0, limit)
            }
            None => (align_up(sp.alloc_cursor, page).ok_or(exhausted.clone())?, rend),
        };
        let first = cand;
        let component = self.graft_component(space);
        loop {
            let end = cand.checked_add(len).ok_or(exhausted.clone())?;
            if end > limit {
                return Err(exhausted);
            }
            match self.first_conflict(&component, cand, end) {
                None => break,
                Some(e) => cand = align_up(e, page).ok_or(exhausted.clone())?,
            }
        }
        let sp = self.space_mut(space)?;
        if hint.is_some() && cand != first {
            sp.counters.conflicts_resolved += 1;
        }
        if hint.is_none() {
            sp.alloc_cursor = cand + len;
        }
        sp.reservations.insert(cand, cand + len);
        Ok(VirtAddr(cand))
    }

    fn check_free(&self, space: &AddressSpace, va: u64, leaf_level: u8) -> Result<(), VmError> {
        let mut node = space.pdb;
        for level in 0..=leaf_level {
            let idx = self.geometry.index(VirtAddr(va), level);
            match self.nodes.entry(node, idx) {
                PageEntry::Empty => return Ok(()),
                PageEntry::Leaf(..) => return Err(VmError::AlreadyMapped(VirtAddr(va))),
                PageEntry::Directory(c) => {
                    if level == leaf_level {
                        return Err(VmError::AlreadyMapped(VirtAddr(va)));
                    }
                    node = c;
                }
            }
        }
        Ok(())
    }

    /// Installs one leaf per physical page starting at `vaddr`.
    /// Returns the number of page-directory entries created on the way.
    pub fn map_range(
        &mut self,
        space: SpaceId,
        vaddr: VirtAddr,
        pages: &[PhysPageId],
    ) -> Result<usize, VmError> {
        let first = pages.first().ok_or(VmError::EmptyRequest)?;
        let size = first.size;
        if pages.iter().any(|p| p.size != size) {
            return Err(VmError::MixedSizeClass);
        }
        let bytes = self.geometry.page_bytes(size);
        if !vaddr.0.is_multiple_of(bytes) {
            return Err(VmError::Misaligned(vaddr));
        }
        let end = (pages.len() as u64)
            .checked_mul(bytes)
            .and_then(|l| vaddr.0.checked_add(l))
            .ok_or(VmError::OutOfRange(vaddr))?;
        if end > 1u64 << self.geometry.covered_bits() {
            return Err(VmError::OutOfRange(vaddr));
        }
        let leaf_level = self.geometry.leaf_level(size);
        {
            let sp = self.space(space)?;
            for i in 0..pages.len() as u64 {
                self.check_free(sp, vaddr.0 + i * bytes, leaf_level)?;
            }
        }
        let mut created = 0;
        for (i, &phys) in pages.iter().enumerate() {
            let va = vaddr.0 + i as u64 * bytes;
            created += self.install_leaf(space, VirtAddr(va), leaf_level, phys);
            self.spaces[space.0 as usize]
                .own_leaves
                .insert(va, va + bytes);
        }
        Ok(created)
    }

    fn install_leaf(&mut self, space: SpaceId, va: VirtAddr, leaf_level: u8, phys: PhysPageId) -> usize {
        let mut path = vec![self.spaces[space.0 as usize].pdb];
        let mut created = 0;
        for level in 0..leaf_level {
            let node = path[level as usize];
            let idx = self.geometry.index(va, level);
            let next = match self.nodes.entry(node, idx) {
                PageEntry::Directory(c) => c,
                PageEntry::Empty => {
                    let c = self.nodes.alloc(level + 1);
                    self.nodes.set(node, idx, PageEntry::Directory(c));
                    self.copy_engine.writes += 1;
                    created += 1;
                    self.spaces[space.0 as usize].counters.pdes_created += 1;
                    self.propagate_structural(space, va, &path, StructuralChange::PdeInserted(c));
                    c
                }
                PageEntry::Leaf(..) => unreachable!("checked by check_free"),
            };
            path.push(next);
        }
        let node = path[leaf_level as usize];
        let idx = self.geometry.index(va, leaf_level);
        self.nodes.set(node, idx, PageEntry::Leaf(phys, Perms::default()));
        self.copy_engine.writes += 1;
        created
    }

    /// Removes `n_pages` consecutive leaves that were mapped through
    /// `space`, prunes emptied directories and invalidates the TLBs.
    pub fn unmap_range(&mut self, space: SpaceId, vaddr: VirtAddr, n_pages: u64) -> Result<(), VmError> {
        if n_pages == 0 {
            return Err(VmError::EmptyRequest);
        }
        let sp = self.space(space)?;
        let mut cur = vaddr.0;
        let mut victims = Vec::with_capacity(n_pages as usize);
        for _ in 0..n_pages {
            let Some(&end) = sp.own_leaves.get(&cur) else {
                return Err(VmError::NotMapped(VirtAddr(cur)));
            };
            let level = match end - cur {
                b if b == self.geometry.page_bytes(SizeClass::Small) => {
                    self.geometry.leaf_level(SizeClass::Small)
                }
                _ => self.geometry.leaf_level(SizeClass::Big),
            };
            victims.push((cur, level));
            cur = end;
        }
        for &(va, level) in &victims {
            self.remove_leaf(space, VirtAddr(va), level);
        }
        let sp = &mut self.spaces[space.0 as usize];
        for &(va, _) in &victims {
            sp.own_leaves.remove(&va);
        }
        // Release reservations that no longer back any mapping.
        let (lo, hi) = (vaddr.0, cur);
        let stale: Vec<u64> = sp
            .reservations
            .iter()
            .filter(|(&s, &e)| s < hi && e > lo)
            .filter(|(&s, &e)| sp.own_leaves.range(s..e).next().is_none())
            .map(|(&s, _)| s)
            .collect();
        for s in stale {
            sp.reservations.remove(&s);
        }
        self.invalidate_tlb(space);
        Ok(())
    }

    fn remove_leaf(&mut self, space: SpaceId, va: VirtAddr, level: u8) {
        let mut path = vec![self.spaces[space.0 as usize].pdb];
        for l in 0..level {
            match self.nodes.entry(path[l as usize], self.geometry.index(va, l)) {
                PageEntry::Directory(c) => path.push(c),
                _ => unreachable!("own leaf without a directory path"),
            }
        }
        let idx = self.geometry.index(va, level);
        self.nodes.set(path[level as usize], idx, PageEntry::Empty);
        self.copy_engine.writes += 1;
        for l in (1..=level as usize).rev() {
            let child = path[l];
            if !self.nodes.get(child).is_empty() {
                break;
            }
            let parent = path[l - 1];
            self.nodes
                .set(parent, self.geometry.index(va, (l - 1) as u8), PageEntry::Empty);
            self.copy_engine.writes += 1;
            self.spaces[space.0 as usize].counters.pdes_removed += 1;
            self.propagate_structural(space, va, &path[..l], StructuralChange::PdeRemoved(child));
        }
    }

    /// Resolves `vaddr`, consulting the TLB first.
    pub fn translate(&mut self, space: SpaceId, vaddr: VirtAddr) -> Result<Translation, PageFault> {
        let sizes = [
            self.geometry.page_bytes(SizeClass::Small),
            self.geometry.page_bytes(SizeClass::Big),
        ];
        let Some(sp) = self.spaces.get_mut(space.0 as usize) else {
            return Err(PageFault { vaddr, level: 0 });
        };
        if let Some((phys, base)) = sp.tlb.lookup(vaddr.0, sizes) {
            return Ok(Translation {
                phys,
                offset: vaddr.0 - base,
            });
        }
        let (phys, base, bytes) = self.walk(space, vaddr)?;
        self.spaces[space.0 as usize].tlb.insert(base, phys, bytes);
        Ok(Translation {
            phys,
            offset: vaddr.0 - base,
        })
    }

    /// Uncached table walk: (page, leaf base, leaf bytes).
    pub fn walk(&self, space: SpaceId, vaddr: VirtAddr) -> Result<(PhysPageId, u64, u64), PageFault> {
        let fault = |level| PageFault { vaddr, level };
        let sp = self.spaces.get(space.0 as usize).ok_or(fault(0))?;
        if self.geometry.covered_bits() < 64 && vaddr.0 >> self.geometry.covered_bits() != 0 {
            return Err(fault(0));
        }
        let mut node = sp.pdb;
        for level in 0..self.geometry.levels {
            match self.nodes.entry(node, self.geometry.index(vaddr, level)) {
                PageEntry::Empty => return Err(fault(level)),
                PageEntry::Directory(c) => node = c,
                PageEntry::Leaf(phys, _) => {
                    let bytes = self.geometry.entry_span(level);
                    return Ok((phys, vaddr.0 & !(bytes - 1), bytes));
                }
            }
        }
        Err(fault(self.geometry.levels - 1))
    }

    /// Flushes the TLB of `space` and, unless disabled, of every
    /// transitive subscriber.
    pub fn invalidate_tlb(&mut self, space: SpaceId) {
        let sp = &mut self.spaces[space.0 as usize];
        sp.tlb.flush();
        sp.counters.tlb_invalidations += 1;
        self.propagate_tlb_invalidation(space);
    }

    fn propagate_tlb_invalidation(&mut self, source: SpaceId) {
        if !self.tlb_propagation {
            return;
        }
        for sub in self.transitive_subscribers(source) {
            let sp = &mut self.spaces[sub.0 as usize];
            sp.tlb.flush();
            sp.counters.tlb_invalidations += 1;
        }
    }

    /// Total TLB invalidations issued across all spaces.
    pub fn total_tlb_invalidations(&self) -> u64 {
        self.spaces.iter().map(|s| s.counters.tlb_invalidations).sum()
    }
}
