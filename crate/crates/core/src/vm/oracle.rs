//! Brute-force table enumeration and JSON table dumps.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::{Mmu, NodeId, PageEntry, PhysPageId, SpaceId, VirtAddr};
use crate::error::VmError;

#[derive(Debug, Clone, Serialize)]
pub struct EntryDump {
    pub index: usize,
    pub kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub child: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phys: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct NodeDump {
    pub id: u32,
    pub level: u8,
    pub entries: Vec<EntryDump>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TableDump {
    pub space: u32,
    pub pdb: u32,
    pub nodes: Vec<NodeDump>,
}

impl Mmu {
    /// Every leaf reachable from the root of `space`, in address order.
    pub fn walk_leaves(&self, space: SpaceId) -> Result<Vec<(VirtAddr, PhysPageId)>, VmError> {
        let pdb = self.space(space)?.pdb;
        let mut out = Vec::new();
        self.collect(pdb, 0, 0, &mut out);
        Ok(out)
    }

    fn collect(&self, node: NodeId, level: u8, base: u64, out: &mut Vec<(VirtAddr, PhysPageId)>) {
        let span = self.geometry.entry_span(level);
        for (idx, e) in self.nodes.get(node).entries().iter().enumerate() {
            let va = base + idx as u64 * span;
            match *e {
                PageEntry::Empty => {}
                PageEntry::Leaf(p, _) => out.push((VirtAddr(va), p)),
                PageEntry::Directory(c) => self.collect(c, level + 1, va, out),
            }
        }
    }

    /// Flat union of the leaves of two spaces. Fails if both spaces map the
    /// same page differently or their leaf extents overlap.
    pub fn union_oracle(
        &self,
        source: SpaceId,
        target: SpaceId,
    ) -> Result<BTreeMap<VirtAddr, PhysPageId>, VmError> {
        let mut map: BTreeMap<VirtAddr, PhysPageId> = BTreeMap::new();
        for space in [source, target] {
            for (va, p) in self.walk_leaves(space)? {
                match map.get(&va) {
                    Some(q) if *q != p => return Err(VmError::InconsistentUnion(va)),
                    _ => {
                        map.insert(va, p);
                    }
                }
            }
        }
        let mut prev_end = 0u64;
        for (va, p) in &map {
            if va.0 < prev_end {
                return Err(VmError::InconsistentUnion(*va));
            }
            prev_end = va.0 + self.geometry.page_bytes(p.size);
        }
        Ok(map)
    }

    /// Structural dump of every node reachable from the root of `space`.
    pub fn dump_table(&self, space: SpaceId) -> Result<TableDump, VmError> {
        let pdb = self.space(space)?.pdb;
        let mut seen = BTreeSet::new();
        let mut nodes = Vec::new();
        let mut stack = vec![pdb];
        while let Some(id) = stack.pop() {
            if !seen.insert(id) {
                continue;
            }
            let node = self.nodes.get(id);
            let mut entries = Vec::new();
            for (index, e) in node.entries().iter().enumerate() {
                match *e {
                    PageEntry::Empty => {}
                    PageEntry::Directory(c) => {
                        stack.push(c);
                        entries.push(EntryDump {
                            index,
                            kind: "pde",
                            child: Some(c.0),
                            phys: None,
                        });
                    }
                    PageEntry::Leaf(p, _) => entries.push(EntryDump {
                        index,
                        kind: "pte",
                        child: None,
                        phys: Some(p.id),
                    }),
                }
            }
            nodes.push(NodeDump {
                id: id.0,
                level: node.level,
                entries,
            });
        }
        nodes.sort_by_key(|n| n.id);
        Ok(TableDump {
            space: space.0,
            pdb: pdb.0,
            nodes,
        })
    }
}
