use serde::Serialize;

use super::{Perms, PhysPageId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PageEntry {
    #[default]
    Empty,
    /// PDE: points at the next-level node.
    Directory(NodeId),
    /// PTE: final translation.
    Leaf(PhysPageId, Perms),
}

impl PageEntry {
    pub fn is_empty(&self) -> bool {
        matches!(self, PageEntry::Empty)
    }
}

#[derive(Debug, Clone)]
pub struct PageTableNode {
    pub id: NodeId,
    pub level: u8,
    entries: Box<[PageEntry]>,
    live: usize,
}

impl PageTableNode {
    pub fn entries(&self) -> &[PageEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> PageEntry {
        self.entries[index]
    }

    pub fn is_empty(&self) -> bool {
        self.live == 0
    }

    pub fn live_entries(&self) -> usize {
        self.live
    }
}

/// Append-only node storage. Ids are never reused within a run, so a
/// stale `Directory` pointer can never alias a newer node.
#[derive(Debug, Clone)]
pub(crate) struct NodeArena {
    nodes: Vec<PageTableNode>,
    fanout: usize,
}

impl NodeArena {
    pub fn new(fanout: usize) -> Self {
        Self {
            nodes: Vec::new(),
            fanout,
        }
    }

    pub fn alloc(&mut self, level: u8) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(PageTableNode {
            id,
            level,
            entries: vec![PageEntry::Empty; self.fanout].into_boxed_slice(),
            live: 0,
        });
        id
    }

    pub fn get(&self, id: NodeId) -> &PageTableNode {
        &self.nodes[id.0 as usize]
    }

    pub fn entry(&self, id: NodeId, index: usize) -> PageEntry {
        self.nodes[id.0 as usize].entries[index]
    }

    pub fn set(&mut self, id: NodeId, index: usize, entry: PageEntry) {
        let node = &mut self.nodes[id.0 as usize];
        let was = !node.entries[index].is_empty();
        let now = !entry.is_empty();
        node.entries[index] = entry;
        match (was, now) {
            (false, true) => node.live += 1,
            (true, false) => node.live -= 1,
            _ => {}
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }
}
