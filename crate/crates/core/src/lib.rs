//! Simulation of co-scheduling compute and graphics work on one GPU by
//! redirecting compute streams into the graphics timeslice group and
//! grafting page tables so both contexts resolve the same addresses.

pub mod audit;
pub mod channel;
pub mod device;
pub mod engine;
pub mod error;
pub mod event;
pub mod harness;
pub mod vm;
pub mod workload;

pub use channel::{
    Channel, ChannelId, ComputeConfig, Context, ContextId, ContextKind, DoorbellToken,
    GpFifoEntry, Snapshot, StreamHandle, StreamId, UserD, WarpSchedMode,
};
pub use device::{Device, DeviceConfig, Knobs};
pub use engine::{
    CommandKind, EngineSummary, ExecRecord, FaultKind, FaultRecord, GpuCommand, SliceRecord,
    TimesliceGroup, TsgId, UtilizationSample,
};
pub use error::{ChannelError, ConfigError, HarnessError, VmError, WorkloadError};
pub use event::{Event, EventKind};
pub use vm::{
    AllocPolicy, GraftReport, Mmu, PageGeometry, PhysPageId, SizeClass, SpaceId, VaLayout,
    VirtAddr,
};
