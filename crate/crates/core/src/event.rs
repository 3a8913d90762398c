//! Device event log, serialized as JSON lines.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Submit,
    Doorbell,
    Bind,
    Unbind,
    Bootstrap,
    Fault,
    TsgActivate,
    TsgIdle,
    ExecStart,
    ExecEnd,
    Semaphore,
    InitCompute,
    BufferComplete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub event: EventKind,
    pub channel: Option<u32>,
    pub tsg: Option<u32>,
    pub stream: Option<u32>,
    /// GPFIFO sequence number of the buffer involved.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vaddr: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl Event {
    pub fn new(time: f64, event: EventKind) -> Self {
        Self {
            time,
            event,
            channel: None,
            tsg: None,
            stream: None,
            seq: None,
            value: None,
            vaddr: None,
            detail: None,
        }
    }

    pub(crate) fn channel(mut self, channel: u32, tsg: u32) -> Self {
        self.channel = Some(channel);
        self.tsg = Some(tsg);
        self
    }

    pub(crate) fn tsg(mut self, tsg: u32) -> Self {
        self.tsg = Some(tsg);
        self
    }

    pub(crate) fn stream(mut self, stream: Option<u32>) -> Self {
        self.stream = stream;
        self
    }

    pub(crate) fn seq(mut self, seq: u64) -> Self {
        self.seq = Some(seq);
        self
    }

    pub(crate) fn value(mut self, value: u64) -> Self {
        self.value = Some(value);
        self
    }

    pub(crate) fn vaddr(mut self, vaddr: u64) -> Self {
        self.vaddr = Some(vaddr);
        self
    }

    pub(crate) fn detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }
}

/// Renders events as JSON lines, one object per line.
pub fn to_json_lines(events: &[Event]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("event serializes"));
        out.push('\n');
    }
    out
}
