//! Shared fixtures for the benchmarks.

use tsgsim_core::workload::{run_datagen, DatagenMode, EpisodeSpec, Metrics, PhaseCost, Testbed};
use tsgsim_core::{DeviceConfig, Mmu, SizeClass, SpaceId};

/// A fresh compute/graphics space pair on the default layout.
pub fn space_pair() -> (Mmu, SpaceId, SpaceId) {
    let dc = DeviceConfig::default();
    let mut m = Mmu::new(dc.geometry, dc.layout).expect("default geometry is valid");
    let hi = m.create_space(m.high_range());
    let lo = m.create_space(m.low_range());
    (m, hi, lo)
}

/// Maps `n` single big pages into `space`.
pub fn map_bigs(m: &mut Mmu, space: SpaceId, n: u64) {
    for _ in 0..n {
        let va = m.allocate(space, 1, SizeClass::Big, None).expect("room for buffer");
        let p = m.alloc_phys(SizeClass::Big);
        m.map_range(space, va, &[p]).expect("fresh range");
    }
}

pub fn datagen(steps: usize, batch: u32, mode: DatagenMode) -> Metrics {
    let mut tb = Testbed::new(DeviceConfig::default(), PhaseCost::default()).expect("default testbed");
    run_datagen(&mut tb, EpisodeSpec { steps, batch, mode }).expect("datagen runs")
}
