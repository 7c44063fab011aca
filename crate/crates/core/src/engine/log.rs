//! Append-only record of a run, serialized as line-delimited JSON: one
//! header line describing the run, then one line per event.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::Role;
use crate::mechanisms::MechanismKind;
use crate::preemption::Trigger;
use crate::resource::ResourceVector;
use crate::scheduler::{BlockId, KernelId};
use crate::time::SimTime;
use crate::workload::TransferDirection;

/// Identifies one kernel invocation of a task independently of the
/// run-specific kernel id: unit is the request (latency-sensitive) or
/// iteration (best-effort) index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KernelKey {
    pub task: usize,
    pub unit: u32,
    pub invocation: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EventKind {
    RequestArrival {
        task: usize,
        request: u32,
    },
    KernelArrival {
        key: KernelKey,
        kernel: KernelId,
        grid_blocks: u32,
        demand: ResourceVector,
        block_ns: u64,
    },
    BlockDispatch {
        kernel: KernelId,
        block: BlockId,
        index: u32,
        sm: u32,
        restore: bool,
    },
    BlockComplete {
        kernel: KernelId,
        block: BlockId,
        sm: u32,
    },
    /// A block stops executing; it keeps its resources until the save ends.
    BlockCheckpoint {
        kernel: KernelId,
        block: BlockId,
        sm: u32,
        remaining_ns: f64,
    },
    SliceExpiry {
        task: usize,
    },
    TransferStart {
        task: usize,
        transfer: u32,
        direction: TransferDirection,
        size_kb: f64,
    },
    TransferEnd {
        task: usize,
        transfer: u32,
    },
    /// Context save finished; `blocks` release their resources.
    PreemptSaveDone {
        plan: u32,
        task: usize,
        beneficiary: Option<KernelKey>,
        trigger: Option<Trigger>,
        blocks: Vec<BlockId>,
        latency_ns: u64,
    },
    /// A checkpointed block (or a whole process's context, when `block` is
    /// absent) has been reloaded.
    PreemptRestoreDone {
        task: usize,
        block: Option<BlockId>,
        latency_ns: u64,
    },
    /// Lower-ranked tasks stop receiving new blocks.
    Withhold {
        task: usize,
        target: KernelKey,
        trigger: Trigger,
    },
    WithholdRelease {
        task: usize,
    },
    KernelComplete {
        kernel: KernelId,
        key: KernelKey,
    },
    RequestComplete {
        task: usize,
        request: u32,
    },
    TaskComplete {
        task: usize,
    },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::RequestArrival { .. } => "request-arrival",
            EventKind::KernelArrival { .. } => "kernel-arrival",
            EventKind::BlockDispatch { .. } => "block-dispatch",
            EventKind::BlockComplete { .. } => "block-complete",
            EventKind::BlockCheckpoint { .. } => "block-checkpoint",
            EventKind::SliceExpiry { .. } => "slice-expiry",
            EventKind::TransferStart { .. } => "transfer-start",
            EventKind::TransferEnd { .. } => "transfer-end",
            EventKind::PreemptSaveDone { .. } => "preempt-save-done",
            EventKind::PreemptRestoreDone { .. } => "preempt-restore-done",
            EventKind::Withhold { .. } => "withhold",
            EventKind::WithholdRelease { .. } => "withhold-release",
            EventKind::KernelComplete { .. } => "kernel-complete",
            EventKind::RequestComplete { .. } => "request-complete",
            EventKind::TaskComplete { .. } => "task-complete",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    #[serde(rename = "t_ns")]
    pub time: SimTime,
    pub seq: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl fmt::Display for SimEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let line = serde_json::to_string(self).map_err(|_| fmt::Error)?;
        f.write_str(&line)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogTask {
    pub id: String,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub mechanism: MechanismKind,
    pub tasks: Vec<LogTask>,
    pub num_sms: u32,
    pub sm_limits: ResourceVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventLog {
    pub header: LogHeader,
    pub events: Vec<SimEvent>,
}

#[derive(Debug, thiserror::Error)]
pub enum LogReadError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("empty event log")]
    Empty,
}

impl EventLog {
    pub fn new(header: LogHeader) -> Self {
        EventLog {
            header,
            events: Vec::new(),
        }
    }

    pub fn push(&mut self, time: SimTime, kind: EventKind) {
        let seq = self.events.len() as u64;
        self.events.push(SimEvent { time, seq, kind });
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<EventLog, LogReadError> {
        let mut lines = r.lines().enumerate().filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()));
        let (_, first) = lines.next().ok_or(LogReadError::Empty)?;
        let header: LogHeader =
            serde_json::from_str(&first?).map_err(|source| LogReadError::Parse { line: 1, source })?;
        let mut events = Vec::new();
        for (i, line) in lines {
            let e: SimEvent =
                serde_json::from_str(&line?).map_err(|source| LogReadError::Parse { line: i + 1, source })?;
            events.push(e);
        }
        Ok(EventLog { header, events })
    }
}
