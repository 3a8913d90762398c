//! Recursive page-directory merge and structural-change propagation.

use super::{GraftReport, Mmu, NodeId, PageEntry, SpaceId, StructuralChange, VirtAddr};
use crate::error::VmError;

#[derive(Clone, Copy, PartialEq, Eq)]
enum MergeMode {
    /// Read-only pass; reports the first leaf collision.
    Check,
    Apply,
    /// Apply, skipping collisions instead of failing.
    ApplyLenient,
}

impl Mmu {
    /// Grafts every mapping of `source` into `target` by merging their
    /// page directories top-down, then registers `target` as a subscriber
    /// of `source`.
    ///
    /// Per slot: an empty target slot receives the source entry (sharing
    /// the whole subtree); two distinct directories are merged one level
    /// down; an empty source slot is left alone. Repeating a graft is a
    /// no-op apart from the TLB invalidation.
    pub fn graft(&mut self, source: SpaceId, target: SpaceId) -> Result<GraftReport, VmError> {
        if source == target {
            return Err(VmError::SelfGraft);
        }
        let src_pdb = self.space(source)?.pdb;
        let tgt_pdb = self.space(target)?.pdb;
        if self.transitive_subscribers(target).contains(&source) {
            return Err(VmError::CycleDetected {
                source_space: source,
                target,
            });
        }

        let mut dry = GraftReport::default();
        self.merge(src_pdb, tgt_pdb, 0, VirtAddr(0), 0, &mut dry, MergeMode::Check)?;

        let mut report = GraftReport::default();
        self.merge(src_pdb, tgt_pdb, 0, VirtAddr(0), 0, &mut report, MergeMode::Apply)?;

        self.spaces[source.0 as usize].subscribers.insert(target);
        self.spaces[target.0 as usize].sources.insert(source);
        self.spaces[target.0 as usize].counters.subscriber_writes += report.entry_writes;

        // Spaces already subscribed to `target` inherit the new entries.
        for sub in self.transitive_subscribers(target) {
            let sub_pdb = self.spaces[sub.0 as usize].pdb;
            let mut r = GraftReport::default();
            self.merge(tgt_pdb, sub_pdb, 0, VirtAddr(0), 0, &mut r, MergeMode::ApplyLenient)?;
            self.spaces[sub.0 as usize].counters.subscriber_writes += r.entry_writes;
        }

        let sp = &mut self.spaces[target.0 as usize];
        sp.tlb.flush();
        sp.counters.tlb_invalidations += 1;
        report.tlb_invalidations = 1;

        let total = self.spaces[source.0 as usize].counters.conflicts_resolved
            + self.spaces[target.0 as usize].counters.conflicts_resolved;
        let seen = self.reported_conflicts.insert((source, target), total).unwrap_or(0);
        report.conflicts_resolved = total - seen;
        Ok(report)
    }

    #[allow(clippy::too_many_arguments)]
    fn merge(
        &mut self,
        src: NodeId,
        tgt: NodeId,
        level: u8,
        base: VirtAddr,
        depth: u64,
        report: &mut GraftReport,
        mode: MergeMode,
    ) -> Result<(), VmError> {
        if src == tgt {
            return Ok(());
        }
        self.copy_engine.reads += 2;
        report.max_depth_descended = report.max_depth_descended.max(depth);
        let span = self.geometry.entry_span(level);
        for idx in 0..self.geometry.fanout() {
            let se = self.nodes.entry(src, idx);
            let te = self.nodes.entry(tgt, idx);
            let slot_va = base + idx as u64 * span;
            match (se, te) {
                (PageEntry::Empty, _) => {}
                (PageEntry::Directory(a), PageEntry::Directory(b)) if a == b => {}
                (PageEntry::Leaf(p, _), PageEntry::Leaf(q, _)) if p == q => {}
                (PageEntry::Directory(_) | PageEntry::Leaf(..), PageEntry::Empty) => {
                    if matches!(se, PageEntry::Directory(_)) {
                        report.pdes_copied += 1;
                    }
                    report.entry_writes += 1;
                    if mode != MergeMode::Check {
                        self.nodes.set(tgt, idx, se);
                        self.copy_engine.writes += 1;
                    }
                }
                (PageEntry::Directory(a), PageEntry::Directory(b)) => {
                    self.merge(a, b, level + 1, slot_va, depth + 1, report, mode)?;
                }
                _ => {
                    if mode != MergeMode::ApplyLenient {
                        return Err(VmError::OverlapDetected(slot_va));
                    }
                }
            }
        }
        Ok(())
    }

    /// Replays a PDE insertion or removal made in `source` into every
    /// transitive subscriber. `src_path` holds the source nodes from the
    /// root down to the node whose entry changed.
    ///
    /// Each subscriber is charged one copy-engine write per change. When
    /// the subscriber reaches the changed node through a shared subtree the
    /// write is idempotent but still issued, matching a hook that locates
    /// the subscriber slot and rewrites it.
    pub(super) fn propagate_structural(
        &mut self,
        source: SpaceId,
        va: VirtAddr,
        src_path: &[NodeId],
        change: StructuralChange,
    ) {
        if self.spaces[source.0 as usize].subscribers.is_empty() {
            return;
        }
        for sub in self.transitive_subscribers(source) {
            self.apply_to_subscriber(sub, va, src_path, change);
        }
    }

    fn apply_to_subscriber(
        &mut self,
        sub: SpaceId,
        va: VirtAddr,
        src_path: &[NodeId],
        change: StructuralChange,
    ) {
        let level = src_path.len() - 1;
        let mut node = self.spaces[sub.0 as usize].pdb;
        for (j, &src_node) in src_path.iter().enumerate() {
            self.copy_engine.reads += 1;
            if node == src_node {
                self.charge_write(sub);
                return;
            }
            let idx = self.geometry.index(va, j as u8);
            let entry = self.nodes.entry(node, idx);
            if j < level {
                match entry {
                    PageEntry::Directory(c) => node = c,
                    PageEntry::Empty => {
                        if let StructuralChange::PdeInserted(_) = change {
                            self.nodes
                                .set(node, idx, PageEntry::Directory(src_path[j + 1]));
                            self.charge_write(sub);
                        }
                        return;
                    }
                    PageEntry::Leaf(..) => {
                        self.spaces[sub.0 as usize].counters.propagation_conflicts += 1;
                        return;
                    }
                }
                continue;
            }
            match (change, entry) {
                (StructuralChange::PdeInserted(child), PageEntry::Empty) => {
                    self.nodes.set(node, idx, PageEntry::Directory(child));
                    self.charge_write(sub);
                }
                (StructuralChange::PdeInserted(child), PageEntry::Directory(c)) if c == child => {
                    self.charge_write(sub);
                }
                (StructuralChange::PdeInserted(child), PageEntry::Directory(c)) => {
                    let span = self.geometry.entry_span(j as u8);
                    let slot_va = VirtAddr(va.0 & !(span - 1));
                    let mut r = GraftReport::default();
                    let _ = self.merge(child, c, j as u8 + 1, slot_va, 0, &mut r, MergeMode::ApplyLenient);
                    self.spaces[sub.0 as usize].counters.subscriber_writes += r.entry_writes;
                }
                (StructuralChange::PdeRemoved(child), PageEntry::Directory(c)) if c == child => {
                    self.nodes.set(node, idx, PageEntry::Empty);
                    self.charge_write(sub);
                }
                (StructuralChange::PdeInserted(_), PageEntry::Leaf(..)) => {
                    self.spaces[sub.0 as usize].counters.propagation_conflicts += 1;
                }
                (StructuralChange::PdeRemoved(_), _) => {}
            }
        }
    }

    fn charge_write(&mut self, sub: SpaceId) {
        self.copy_engine.writes += 1;
        self.spaces[sub.0 as usize].counters.subscriber_writes += 1;
    }
}
