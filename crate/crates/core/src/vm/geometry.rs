//! Radix page-table geometry and virtual-address layout.

use serde::{Deserialize, Serialize};

use super::{SizeClass, VirtAddr};
use crate::error::VmError;

pub const DEFAULT_HIGH_BASE: u64 = 0x7000_0000_0000;
pub const DEFAULT_LOW_BASE: u64 = 0x1_0000_0000;

/// Shape of the radix tree.
///
/// Level 0 is the root (the page-directory base). Small pages are leaves of
/// the last level, big pages are leaves one level above it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageGeometry {
    pub levels: u8,
    pub bits_per_level: u8,
    pub page_shift: u8,
}

impl Default for PageGeometry {
    fn default() -> Self {
        Self {
            levels: 5,
            bits_per_level: 9,
            page_shift: 12,
        }
    }
}

impl PageGeometry {
    pub fn validate(&self) -> Result<(), VmError> {
        if self.levels < 2 || self.levels > 8 {
            return Err(VmError::Geometry(format!(
                "levels must be in 2..=8, got {}",
                self.levels
            )));
        }
        if self.bits_per_level == 0 || self.bits_per_level > 12 {
            return Err(VmError::Geometry(format!(
                "bits_per_level must be in 1..=12, got {}",
                self.bits_per_level
            )));
        }
        if !(10..=16).contains(&self.page_shift) {
            return Err(VmError::Geometry(format!(
                "page_shift must be in 10..=16, got {}",
                self.page_shift
            )));
        }
        if self.covered_bits() > 63 {
            return Err(VmError::Geometry(format!(
                "geometry covers {} bits, more than 63",
                self.covered_bits()
            )));
        }
        Ok(())
    }

    pub fn fanout(&self) -> usize {
        1usize << self.bits_per_level
    }

    /// Number of address bits translated by a full walk.
    pub fn covered_bits(&self) -> u32 {
        self.page_shift as u32 + self.levels as u32 * self.bits_per_level as u32
    }

    pub fn leaf_level(&self, size: SizeClass) -> u8 {
        match size {
            SizeClass::Small => self.levels - 1,
            SizeClass::Big => self.levels - 2,
        }
    }

    /// Bytes covered by one entry of a node at `level`.
    pub fn entry_span(&self, level: u8) -> u64 {
        let shift = self.page_shift as u32
            + (self.levels as u32 - 1 - level as u32) * self.bits_per_level as u32;
        1u64 << shift
    }

    pub fn page_bytes(&self, size: SizeClass) -> u64 {
        self.entry_span(self.leaf_level(size))
    }

    pub fn index(&self, va: VirtAddr, level: u8) -> usize {
        let shift = self.page_shift as u32
            + (self.levels as u32 - 1 - level as u32) * self.bits_per_level as u32;
        ((va.0 >> shift) & ((1u64 << self.bits_per_level) - 1)) as usize
    }

    /// Size class whose leaves live at `level`, if any.
    pub fn size_at_level(&self, level: u8) -> Option<SizeClass> {
        if level == self.levels - 1 {
            Some(SizeClass::Small)
        } else if level == self.levels - 2 {
            Some(SizeClass::Big)
        } else {
            None
        }
    }
}

/// Placement of the two allocator regions inside the usable VA window.
///
/// `HighRange` spaces allocate upward from `high_base` to the end of the
/// usable window; `LowRange` spaces allocate upward from `low_base` to
/// `high_base`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaLayout {
    pub va_width: u8,
    pub high_base: u64,
    pub low_base: u64,
}

impl Default for VaLayout {
    fn default() -> Self {
        Self {
            va_width: 48,
            high_base: DEFAULT_HIGH_BASE,
            low_base: DEFAULT_LOW_BASE,
        }
    }
}

impl VaLayout {
    pub fn limit(&self) -> u64 {
        1u64 << self.va_width
    }

    pub fn validate(&self, geometry: &PageGeometry) -> Result<(), VmError> {
        if self.va_width as u32 > geometry.covered_bits() || self.va_width < 20 {
            return Err(VmError::Geometry(format!(
                "va_width {} must be in 20..={}",
                self.va_width,
                geometry.covered_bits()
            )));
        }
        let big = geometry.page_bytes(SizeClass::Big);
        if !self.low_base.is_multiple_of(big) || !self.high_base.is_multiple_of(big) {
            return Err(VmError::Geometry(
                "allocator bases must be big-page aligned".into(),
            ));
        }
        if self.low_base >= self.high_base || self.high_base >= self.limit() {
            return Err(VmError::Geometry(format!(
                "need low_base < high_base < 2^{}",
                self.va_width
            )));
        }
        Ok(())
    }
}
