//! Trace audits: temporal exclusivity of TSGs and per-channel FIFO order.

use std::collections::BTreeMap;

use crate::device::Device;
use crate::engine::{ExecRecord, SliceRecord, EPS};
use crate::event::{Event, EventKind};

/// Slices never overlap, and every command ran inside a slice of its own
/// TSG.
pub fn check_temporal_exclusivity(
    slices: &[SliceRecord],
    execs: &[ExecRecord],
) -> Result<(), String> {
    let mut sorted = slices.to_vec();
    sorted.sort_by(|a, b| a.start.total_cmp(&b.start));
    for w in sorted.windows(2) {
        if w[1].start < w[0].end - EPS {
            return Err(format!(
                "{} active over [{}, {}] overlaps {} from {}",
                w[0].tsg, w[0].start, w[0].end, w[1].tsg, w[1].start
            ));
        }
    }
    for e in execs {
        let inside = sorted
            .iter()
            .any(|s| s.tsg == e.tsg && s.start <= e.start + EPS && e.end <= s.end + EPS);
        if !inside {
            return Err(format!(
                "{} on {} ran over [{}, {}] outside any slice of {}",
                e.kind, e.channel, e.start, e.end, e.tsg
            ));
        }
    }
    Ok(())
}

/// Within each channel, buffers complete in submission order.
pub fn check_fifo(events: &[Event]) -> Result<(), String> {
    let mut last: BTreeMap<u32, u64> = BTreeMap::new();
    for e in events.iter().filter(|e| e.event == EventKind::BufferComplete) {
        let (Some(ch), Some(seq)) = (e.channel, e.seq) else {
            return Err("buffer completion without channel or sequence".into());
        };
        if let Some(&prev) = last.get(&ch) {
            if seq <= prev {
                return Err(format!("channel {ch} completed buffer {seq} after {prev}"));
            }
        }
        last.insert(ch, seq);
    }
    Ok(())
}

/// Runs both audits on a device's trace.
pub fn audit_device(dev: &Device) -> Result<(), String> {
    check_temporal_exclusivity(&dev.slices(), dev.exec_records())?;
    check_fifo(dev.events())
}
