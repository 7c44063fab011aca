//! Application-level concurrency mechanisms layered over the block
//! scheduler: priority streams, time-slicing and MPS, plus the shared
//! host-link transfer channel.

use serde::{Deserialize, Serialize};

use crate::error::{AdmissionError, FootprintResource, ValidationError};
use crate::resource::{block_demand, max_resident_blocks_per_sm, GpuConfig, ResourceVector};
use crate::scheduler::{DispatchConstraint, Gate, QueuedKernel, StallReason};
use crate::time::SimTime;
use crate::workload::{transfer_duration, TaskTrace, TransferDirection};

pub const HIGHEST_STREAM_PRIORITY: i8 = -2;
pub const LOWEST_STREAM_PRIORITY: i8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub enum MechanismConfig {
    /// All tasks share one process; one stream per task. Lower number is
    /// higher priority.
    PriorityStreams { priorities: Vec<i8> },
    TimeSlicing {
        slice_length_us: f64,
        ctx_save_cost_us: f64,
        ctx_restore_cost_us: f64,
    },
    Mps {
        /// Per-client cap on executing threads, percent of the GPU total.
        thread_limit_pct: Vec<f64>,
        /// Per-client guaranteed share, enforced by fine-grained preemption.
        min_reservation: Vec<Option<ResourceVector>>,
        /// Keep head-of-line blocking even when the head client is capped.
        strict_head_of_line: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismKind {
    Streams,
    Timeslicing,
    Mps,
}

/// Capability matrix of a mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MechanismAttributes {
    pub separate_processes: bool,
    pub colocation: bool,
    pub priorities: bool,
}

impl MechanismKind {
    pub fn attributes(self) -> MechanismAttributes {
        match self {
            MechanismKind::Streams => MechanismAttributes {
                separate_processes: false,
                colocation: true,
                priorities: true,
            },
            MechanismKind::Timeslicing => MechanismAttributes {
                separate_processes: true,
                colocation: false,
                priorities: false,
            },
            MechanismKind::Mps => MechanismAttributes {
                separate_processes: true,
                colocation: true,
                priorities: false,
            },
        }
    }
}

impl MechanismConfig {
    pub fn kind(&self) -> MechanismKind {
        match self {
            MechanismConfig::PriorityStreams { .. } => MechanismKind::Streams,
            MechanismConfig::TimeSlicing { .. } => MechanismKind::Timeslicing,
            MechanismConfig::Mps { .. } => MechanismKind::Mps,
        }
    }

    /// Default parameters of `kind` for `num_tasks` tasks on `gpu`.
    pub fn default_for(kind: MechanismKind, num_tasks: usize, gpu: &GpuConfig) -> Self {
        match kind {
            MechanismKind::Streams => MechanismConfig::PriorityStreams {
                priorities: vec![LOWEST_STREAM_PRIORITY; num_tasks],
            },
            MechanismKind::Timeslicing => MechanismConfig::TimeSlicing {
                slice_length_us: gpu.slice_length_us,
                ctx_save_cost_us: gpu.ctx_save_cost_us,
                ctx_restore_cost_us: gpu.ctx_restore_cost_us,
            },
            MechanismKind::Mps => MechanismConfig::Mps {
                thread_limit_pct: vec![100.0; num_tasks],
                min_reservation: vec![None; num_tasks],
                strict_head_of_line: false,
            },
        }
    }

    pub fn validate(&self, num_tasks: usize) -> Result<(), ValidationError> {
        match self {
            MechanismConfig::PriorityStreams { priorities } => {
                if priorities.len() != num_tasks {
                    return Err(ValidationError::new("one stream priority per task required"));
                }
                if let Some(p) = priorities
                    .iter()
                    .find(|p| !(HIGHEST_STREAM_PRIORITY..=LOWEST_STREAM_PRIORITY).contains(*p))
                {
                    return Err(ValidationError::new(format!(
                        "stream priority {p} outside [{HIGHEST_STREAM_PRIORITY}, {LOWEST_STREAM_PRIORITY}]"
                    )));
                }
            }
            MechanismConfig::TimeSlicing {
                slice_length_us,
                ctx_save_cost_us,
                ctx_restore_cost_us,
            } => {
                if !(slice_length_us.is_finite() && *slice_length_us > 0.0) {
                    return Err(ValidationError::new("slice_length_us must be positive"));
                }
                if !(*ctx_save_cost_us >= 0.0 && *ctx_restore_cost_us >= 0.0) {
                    return Err(ValidationError::new("context switch costs must be non-negative"));
                }
            }
            MechanismConfig::Mps {
                thread_limit_pct,
                min_reservation,
                ..
            } => {
                if thread_limit_pct.len() != num_tasks || min_reservation.len() != num_tasks {
                    return Err(ValidationError::new("one MPS thread limit and reservation per client required"));
                }
                if let Some(c) = thread_limit_pct.iter().find(|c| !(**c > 0.0 && **c <= 100.0)) {
                    return Err(ValidationError::new(format!("MPS thread limit {c}% outside (0, 100]")));
                }
            }
        }
        Ok(())
    }
}

/// Per-client MPS thread cap suggested for `n` clients: 100% / (0.5 n),
/// capped at 100%.
pub fn recommended_cap_pct(n: usize) -> f64 {
    if n == 0 {
        return 100.0;
    }
    (100.0 / (0.5 * n as f64)).min(100.0)
}

/// Resources a process keeps resident on the device for its whole lifetime.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    pub global_mem_mb: u64,
    pub per_sm_registers: u64,
    pub per_sm_shared_kb: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcessContext {
    pub client_id: String,
    pub footprint: Footprint,
    pub resident: bool,
}

impl ProcessContext {
    pub fn for_trace(trace: &TaskTrace, gpu: &GpuConfig) -> Self {
        ProcessContext {
            client_id: trace.task_id.clone(),
            footprint: footprint_of(trace, gpu),
            resident: false,
        }
    }
}

/// Worst-case per-SM footprint over a trace: for each kernel the blocks that
/// land on one SM when its grid is spread evenly, capped by residency.
pub fn footprint_of(trace: &TaskTrace, gpu: &GpuConfig) -> Footprint {
    let mut fp = Footprint {
        global_mem_mb: trace.global_mem_alloc_mb,
        ..Default::default()
    };
    for inv in &trace.invocations {
        let k = &inv.kernel;
        let per_sm = k
            .grid_blocks
            .div_ceil(gpu.num_sms)
            .min(max_resident_blocks_per_sm(k, gpu));
        let d = block_demand(k);
        fp.per_sm_registers = fp.per_sm_registers.max(u64::from(per_sm) * u64::from(d.registers));
        fp.per_sm_shared_kb = fp.per_sm_shared_kb.max(u64::from(per_sm) * u64::from(d.shared_mem_kb));
    }
    fp
}

type FootprintField = fn(&Footprint) -> u64;

/// Time-slicing admission: footprints are never swapped out, so the sum over
/// resident processes must fit the device.
pub fn admit_process(
    p: &mut ProcessContext,
    residents: &[ProcessContext],
    g: &GpuConfig,
) -> Result<(), AdmissionError> {
    let sum = |f: FootprintField| residents.iter().filter(|r| r.resident).map(|r| f(&r.footprint)).sum::<u64>();
    let checks: [(FootprintResource, FootprintField, u64); 3] = [
        (FootprintResource::GlobalMem, |f| f.global_mem_mb, g.global_mem_mb),
        (FootprintResource::Registers, |f| f.per_sm_registers, u64::from(g.registers_per_sm)),
        (FootprintResource::SharedMem, |f| f.per_sm_shared_kb, u64::from(g.shared_mem_per_sm_kb)),
    ];
    for (resource, get, cap) in checks {
        let used = sum(get);
        let want = get(&p.footprint);
        if used + want > cap {
            return Err(AdmissionError {
                client: p.client_id.clone(),
                resource,
                requested: want,
                available: cap.saturating_sub(used),
            });
        }
    }
    p.resident = true;
    Ok(())
}

/// Streams: rank by priority, never revoke executing blocks.
pub struct StreamsConstraint<'a> {
    pub priorities: &'a [i8],
    pub withheld: &'a [bool],
}

impl DispatchConstraint for StreamsConstraint<'_> {
    fn rank(&self, k: &QueuedKernel) -> i64 {
        i64::from(self.priorities[k.task])
    }

    fn gate(&self, k: &QueuedKernel) -> Gate {
        if self.withheld[k.task] {
            Gate::Stalled(StallReason::Withheld)
        } else {
            Gate::Open
        }
    }
}

/// MPS: first-come first-served up to each client's thread cap.
pub struct MpsConstraint<'a> {
    pub cap_threads: &'a [u64],
    pub usage_threads: Vec<u64>,
    /// Clients holding a reservation are considered ahead of the rest.
    pub reserved: &'a [bool],
    pub withheld: &'a [bool],
    pub strict_head_of_line: bool,
}

impl DispatchConstraint for MpsConstraint<'_> {
    fn rank(&self, k: &QueuedKernel) -> i64 {
        if self.reserved[k.task] {
            -1
        } else {
            0
        }
    }

    fn gate(&self, k: &QueuedKernel) -> Gate {
        if self.withheld[k.task] {
            return Gate::Stalled(StallReason::Withheld);
        }
        if self.usage_threads[k.task] + u64::from(k.demand.threads) > self.cap_threads[k.task] {
            return Gate::Stalled(StallReason::Cap);
        }
        Gate::Open
    }

    fn bypass(&self, reason: StallReason) -> bool {
        !(reason == StallReason::Cap && self.strict_head_of_line)
    }

    fn on_place(&mut self, k: &QueuedKernel) {
        self.usage_threads[k.task] += u64::from(k.demand.threads);
    }
}

/// Time-slicing: only the slice owner dispatches.
pub struct SliceConstraint {
    pub active: Option<usize>,
}

impl DispatchConstraint for SliceConstraint {
    fn gate(&self, k: &QueuedKernel) -> Gate {
        if self.active == Some(k.task) {
            Gate::Open
        } else {
            Gate::Stalled(StallReason::Inactive)
        }
    }
}

/// What the time-slice controller should do next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rotation {
    /// Keep (or renew) the current owner.
    Stay,
    SwitchTo(usize),
    /// No process has ready work.
    Idle,
}

/// Round-robin slice assignment. Processes without ready work are skipped;
/// an owner without ready work gives up its slice at once.
pub fn timeslice_rotate(active: Option<usize>, ready: &[bool], slice_expired: bool) -> Rotation {
    let n = ready.len();
    let owner_ready = active.is_some_and(|a| ready[a]);
    if owner_ready && !slice_expired {
        return Rotation::Stay;
    }
    let start = active.map_or(0, |a| a + 1);
    let next = (0..n).map(|i| (start + i) % n).find(|&p| Some(p) != active && ready[p]);
    match next {
        Some(p) => Rotation::SwitchTo(p),
        None if owner_ready => Rotation::Stay,
        None => Rotation::Idle,
    }
}

/// One FIFO host-link channel per direction, shared by every process.
#[derive(Debug, Clone, Default)]
pub struct TransferChannel {
    busy_until: [SimTime; 2],
    pub bandwidth_gbps: f64,
}

impl TransferChannel {
    pub fn new(bandwidth_gbps: f64) -> Self {
        TransferChannel {
            busy_until: [SimTime::ZERO; 2],
            bandwidth_gbps,
        }
    }

    /// Queues a transfer submitted at `at`; returns its (start, end).
    pub fn submit(&mut self, dir: TransferDirection, size_kb: f64, at: SimTime) -> (SimTime, SimTime) {
        let lane = match dir {
            TransferDirection::HostToDevice => 0,
            TransferDirection::DeviceToHost => 1,
        };
        let start = at.max(self.busy_until[lane]);
        let end = start + transfer_duration(size_kb, self.bandwidth_gbps);
        self.busy_until[lane] = end;
        (start, end)
    }
}

/// Start and end of each transfer, in submission order.
pub fn transfer_channel(
    ops: &[(SimTime, TransferDirection, f64)],
    bandwidth_gbps: f64,
) -> Vec<(SimTime, SimTime)> {
    let mut ch = TransferChannel::new(bandwidth_gbps);
    ops.iter().map(|&(at, dir, size)| ch.submit(dir, size, at)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resource::KernelDescriptor;
    use crate::workload::{KernelInvocation, TaskKind};

    fn trace(id: &str, k: KernelDescriptor, mem: u64) -> TaskTrace {
        TaskTrace {
            task_id: id.into(),
            kind: TaskKind::Training,
            invocations: vec![KernelInvocation::new(k)],
            global_mem_alloc_mb: mem,
        }
    }

    #[test]
    fn forty_k_register_processes_collide() {
        let g = GpuConfig::default();
        // 1024 threads x 40 registers = 40960 registers, one block per SM
        let k = KernelDescriptor::new("big", 82, 1024, 40, 0, 100.0);
        let mut a = ProcessContext::for_trace(&trace("a", k.clone(), 1000), &g);
        let mut b = ProcessContext::for_trace(&trace("b", k, 1000), &g);
        assert_eq!(a.footprint.per_sm_registers, 40960);
        admit_process(&mut a, &[], &g).unwrap();
        let err = admit_process(&mut b, std::slice::from_ref(&a), &g).unwrap_err();
        assert_eq!(err.resource, FootprintResource::Registers);
        assert!(err.to_string().contains("registers"));
        assert!(!b.resident);
    }

    #[test]
    fn singleton_full_device_admitted() {
        let g = GpuConfig::default();
        let k = KernelDescriptor::new("all", 82 * 16, 64, 64, 64, 100.0);
        let mut p = ProcessContext::for_trace(&trace("p", k, g.global_mem_mb), &g);
        assert_eq!(p.footprint.per_sm_registers, 65536);
        admit_process(&mut p, &[], &g).unwrap();
    }

    #[test]
    fn global_memory_over_commit() {
        let g = GpuConfig::default();
        let k = KernelDescriptor::new("small", 1, 32, 16, 0, 10.0);
        let mut a = ProcessContext::for_trace(&trace("a", k.clone(), 12 * 1024), &g);
        let mut b = ProcessContext::for_trace(&trace("b", k, 13 * 1024), &g);
        admit_process(&mut a, &[], &g).unwrap();
        let err = admit_process(&mut b, std::slice::from_ref(&a), &g).unwrap_err();
        assert_eq!(err.resource, FootprintResource::GlobalMem);
    }

    #[test]
    fn recommended_caps() {
        assert_eq!(recommended_cap_pct(2), 100.0);
        assert_eq!(recommended_cap_pct(4), 50.0);
        assert_eq!(recommended_cap_pct(8), 25.0);
    }

    #[test]
    fn rotation_rules() {
        assert_eq!(timeslice_rotate(Some(0), &[true, true], false), Rotation::Stay);
        assert_eq!(timeslice_rotate(Some(0), &[true, true], true), Rotation::SwitchTo(1));
        assert_eq!(timeslice_rotate(Some(1), &[true, true], true), Rotation::SwitchTo(0));
        assert_eq!(timeslice_rotate(Some(0), &[true, false], true), Rotation::Stay);
        assert_eq!(timeslice_rotate(Some(0), &[false, true], false), Rotation::SwitchTo(1));
        assert_eq!(timeslice_rotate(Some(0), &[false, false], false), Rotation::Idle);
        assert_eq!(timeslice_rotate(None, &[false, true, true], false), Rotation::SwitchTo(1));
        // skips idle processes in round-robin order
        assert_eq!(timeslice_rotate(Some(0), &[true, false, true], true), Rotation::SwitchTo(2));
        assert_eq!(timeslice_rotate(Some(0), &[true], true), Rotation::Stay);
    }

    #[test]
    fn transfer_arithmetic_and_serialization() {
        let h2d = TransferDirection::HostToDevice;
        let out = transfer_channel(&[(SimTime::ZERO, h2d, 1000.0)], 16.0);
        assert_eq!(out, vec![(SimTime::ZERO, SimTime::from_us(62.5))]);

        let out = transfer_channel(&[(SimTime::ZERO, h2d, 1000.0), (SimTime::ZERO, h2d, 1000.0)], 16.0);
        assert_eq!(out[1].0, out[0].1);
        assert_eq!(out[1].1, SimTime::from_us(125.0));

        // directions do not serialize with each other
        let out = transfer_channel(
            &[(SimTime::ZERO, h2d, 1000.0), (SimTime::ZERO, TransferDirection::DeviceToHost, 1000.0)],
            16.0,
        );
        assert_eq!(out[1].0, SimTime::ZERO);
        assert!(transfer_channel(&[], 16.0).is_empty());
    }

    #[test]
    fn table_two_matrix() {
        let s = MechanismKind::Streams.attributes();
        assert!(!s.separate_processes && s.colocation && s.priorities);
        let t = MechanismKind::Timeslicing.attributes();
        assert!(t.separate_processes && !t.colocation && !t.priorities);
        let m = MechanismKind::Mps.attributes();
        assert!(m.separate_processes && m.colocation && !m.priorities);
    }

    #[test]
    fn validation() {
        let bad = MechanismConfig::PriorityStreams { priorities: vec![-3] };
        assert!(bad.validate(1).is_err());
        let bad = MechanismConfig::Mps {
            thread_limit_pct: vec![0.0],
            min_reservation: vec![None],
            strict_head_of_line: false,
        };
        assert!(bad.validate(1).is_err());
        let ok = MechanismConfig::default_for(MechanismKind::Timeslicing, 2, &GpuConfig::default());
        ok.validate(2).unwrap();
    }
}
