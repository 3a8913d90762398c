use thiserror::Error;

use crate::channel::{ChannelId, ContextId, StreamId};
use crate::vm::{PageFault, SpaceId, VirtAddr};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VmError {
    #[error("invalid page geometry: {0}")]
    Geometry(String),
    #[error("address {0} is not aligned to the page size")]
    Misaligned(VirtAddr),
    #[error("address {0} lies outside the translated range")]
    OutOfRange(VirtAddr),
    #[error("request must cover at least one page")]
    EmptyRequest,
    #[error("all pages of one mapping must share a size class")]
    MixedSizeClass,
    #[error("no free range of {n_pages} pages left in the region of {space}")]
    AddressSpaceExhausted { space: SpaceId, n_pages: u64 },
    #[error("{0} is already mapped")]
    AlreadyMapped(VirtAddr),
    #[error("{0} is not mapped")]
    NotMapped(VirtAddr),
    #[error(transparent)]
    PageFault(#[from] PageFault),
    #[error("cannot graft a space into itself")]
    SelfGraft,
    #[error("leaf ranges of the grafted spaces overlap at {0}")]
    OverlapDetected(VirtAddr),
    #[error("grafting {source_space} into {target} would create a subscriber cycle")]
    CycleDetected { source_space: SpaceId, target: SpaceId },
    #[error("union of tables disagrees at {0}")]
    InconsistentUnion(VirtAddr),
    #[error("unknown address space {0}")]
    UnknownSpace(SpaceId),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelError {
    #[error(transparent)]
    Vm(#[from] VmError),
    #[error("GPFIFO ring of channel {0} is full")]
    RingFull(ChannelId),
    #[error("stream {0} is already bound")]
    AlreadyBound(StreamId),
    #[error("stream {0} is not bound")]
    NotBound(StreamId),
    #[error("forwarding pool of context {0} is exhausted")]
    PoolExhausted(ContextId),
    #[error("context {ctx} has the wrong kind for this operation")]
    WrongContextKind { ctx: ContextId },
    #[error("engine went idle at t={time} before the awaited condition held")]
    Stalled { time: f64 },
    #[error("invalid command: {0}")]
    InvalidCommand(String),
    #[error("unknown {0}")]
    Unknown(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorkloadError {
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("dependency violated: {0}")]
    Dependency(String),
    #[error("invalid workload: {0}")]
    InvalidSpec(String),
    #[error("workload recorded {0} device faults")]
    Faulted(usize),
}

impl From<VmError> for WorkloadError {
    fn from(e: VmError) -> Self {
        WorkloadError::Channel(ChannelError::Vm(e))
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ConfigError {
    pub(crate) fn invalid(key: &str, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            key: key.to_string(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<VmError> for HarnessError {
    fn from(e: VmError) -> Self {
        HarnessError::Workload(e.into())
    }
}

impl From<ChannelError> for HarnessError {
    fn from(e: ChannelError) -> Self {
        HarnessError::Workload(e.into())
    }
}
