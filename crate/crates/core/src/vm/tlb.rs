use std::collections::BTreeMap;

use super::PhysPageId;

/// Per-space translation cache. Unbounded within a run; invalidation
/// flushes everything.
#[derive(Debug, Clone, Default)]
pub struct Tlb {
    entries: BTreeMap<u64, (PhysPageId, u64)>,
    pub hits: u64,
    pub misses: u64,
    pub flushes: u64,
}

impl Tlb {
    /// Looks up `va` among cached leaves of either page size.
    pub fn lookup(&mut self, va: u64, page_sizes: [u64; 2]) -> Option<(PhysPageId, u64)> {
        for bytes in page_sizes {
            let base = va & !(bytes - 1);
            if let Some(&(phys, len)) = self.entries.get(&base) {
                if len == bytes {
                    self.hits += 1;
                    return Some((phys, base));
                }
            }
        }
        self.misses += 1;
        None
    }

    pub fn insert(&mut self, base: u64, phys: PhysPageId, bytes: u64) {
        self.entries.insert(base, (phys, bytes));
    }

    pub fn flush(&mut self) {
        self.entries.clear();
        self.flushes += 1;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
