//! Hardware thread-block scheduler: kernel selection under the leftover
//! policy and block placement under the most-room policy.

use serde::{Deserialize, Serialize};

use crate::resource::ResourceVector;

/// Index of a kernel launch within one simulation run.
pub type KernelId = u32;
/// Slot of a block within one simulation run.
pub type BlockId = u32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmState {
    pub sm_id: u32,
    pub limits: ResourceVector,
    pub free: ResourceVector,
    pub resident: Vec<BlockId>,
}

impl SmState {
    pub fn new(sm_id: u32, limits: ResourceVector) -> Self {
        SmState {
            sm_id,
            limits,
            free: limits,
            resident: Vec::new(),
        }
    }

    pub fn used(&self) -> ResourceVector {
        self.limits - self.free
    }

    pub fn allocate(&mut self, demand: ResourceVector) {
        self.free -= demand;
    }

    pub fn release(&mut self, demand: ResourceVector) {
        self.free += demand;
        debug_assert!(self.free.fits_within(&self.limits));
    }
}

pub fn empty_sms(num_sms: u32, limits: ResourceVector) -> Vec<SmState> {
    (0..num_sms).map(|i| SmState::new(i, limits)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockPhase {
    Pending,
    /// Holding SM resources while a checkpointed context is reloaded.
    Restoring,
    Executing,
    /// Stopped, resources still held until the context save finishes.
    Saving,
    Checkpointed,
    Done,
}

/// Execution state of one thread block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockState {
    pub kernel: KernelId,
    pub block_index: u32,
    pub sm_id: Option<u32>,
    pub phase: BlockPhase,
    /// Work left, in nanoseconds of uncontended execution.
    pub remaining_work: f64,
    pub preempt_count: u32,
}

/// Order in which the leftover policy drains arrived kernels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeftoverOrder {
    #[default]
    Fifo,
    Lifo,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueuedKernel {
    pub kernel: KernelId,
    pub task: usize,
    pub arrival_seq: u64,
    pub demand: ResourceVector,
    pub undispatched: u32,
}

/// Arrived kernels that still have blocks to dispatch, in arrival order.
#[derive(Debug, Clone, Default)]
pub struct DispatchQueue {
    pub order: LeftoverOrder,
    entries: Vec<QueuedKernel>,
}

impl DispatchQueue {
    pub fn new(order: LeftoverOrder) -> Self {
        DispatchQueue {
            order,
            entries: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Adds `blocks` undispatched blocks for `k`, inserting the kernel at
    /// its arrival position if it is not queued.
    pub fn push(&mut self, k: QueuedKernel) {
        if let Some(e) = self.entries.iter_mut().find(|e| e.kernel == k.kernel) {
            e.undispatched += k.undispatched;
            return;
        }
        let pos = self.entries.partition_point(|e| e.arrival_seq < k.arrival_seq);
        self.entries.insert(pos, k);
    }

    pub fn get(&self, kernel: KernelId) -> Option<&QueuedKernel> {
        self.entries.iter().find(|e| e.kernel == kernel)
    }

    /// Entries in leftover order (head first).
    pub fn in_order(&self) -> Vec<&QueuedKernel> {
        match self.order {
            LeftoverOrder::Fifo => self.entries.iter().collect(),
            LeftoverOrder::Lifo => self.entries.iter().rev().collect(),
        }
    }

    pub fn select_next_kernel(&self) -> Option<&QueuedKernel> {
        self.in_order().into_iter().find(|e| e.undispatched > 0)
    }

    fn take_one(&mut self, kernel: KernelId) {
        let idx = self
            .entries
            .iter()
            .position(|e| e.kernel == kernel)
            .expect("kernel is queued");
        self.entries[idx].undispatched -= 1;
        if self.entries[idx].undispatched == 0 {
            self.entries.remove(idx);
        }
    }
}

/// Most-room placement: the feasible SM with the most free threads, then
/// most free registers, then most free shared memory, then lowest id.
pub fn place_block(demand: &ResourceVector, sms: &[SmState]) -> Option<u32> {
    sms.iter()
        .filter(|sm| demand.fits_within(&sm.free))
        .min_by(|a, b| {
            b.free
                .threads
                .cmp(&a.free.threads)
                .then(b.free.registers.cmp(&a.free.registers))
                .then(b.free.shared_mem_kb.cmp(&a.free.shared_mem_kb))
                .then(a.sm_id.cmp(&b.sm_id))
        })
        .map(|sm| sm.sm_id)
}

/// Why a mechanism refuses to dispatch a kernel's next block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StallReason {
    /// The client's thread cap would be exceeded.
    Cap,
    /// Resources are being held for an upcoming protected kernel.
    Withheld,
    /// The kernel's process does not own the current time slice.
    Inactive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Open,
    Stalled(StallReason),
}

/// Mechanism hooks consulted by [`dispatch_round`].
pub trait DispatchConstraint {
    /// Lower ranks are considered first; equal ranks keep leftover order.
    fn rank(&self, _k: &QueuedKernel) -> i64 {
        0
    }

    fn gate(&self, _k: &QueuedKernel) -> Gate {
        Gate::Open
    }

    /// Whether later kernels may dispatch past a kernel stalled for `reason`.
    fn bypass(&self, _reason: StallReason) -> bool {
        true
    }

    fn on_place(&mut self, _k: &QueuedKernel) {}
}

/// Plain leftover policy with no mechanism constraints.
pub struct Unconstrained;

impl DispatchConstraint for Unconstrained {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub kernel: KernelId,
    pub task: usize,
    pub sm_id: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DispatchOutcome {
    pub placements: Vec<Placement>,
    /// Kernels skipped because of a bypassable mechanism stall.
    pub bypassed: Vec<(KernelId, StallReason)>,
    /// Kernel whose undispatched blocks fit on no SM, halting the round.
    pub blocked: Option<KernelId>,
    /// Kernel whose non-bypassable stall halted the round.
    pub halted: Option<(KernelId, StallReason)>,
}

/// Dispatches blocks until nothing more fits or a constraint stops the round.
pub fn dispatch_round(
    q: &mut DispatchQueue,
    sms: &mut [SmState],
    constraint: &mut dyn DispatchConstraint,
) -> DispatchOutcome {
    let mut out = DispatchOutcome::default();
    let mut candidates: Vec<(i64, usize, KernelId)> = q
        .in_order()
        .into_iter()
        .enumerate()
        .map(|(pos, e)| (constraint.rank(e), pos, e.kernel))
        .collect();
    candidates.sort();

    'kernels: for (_, _, kid) in candidates {
        loop {
            let Some(entry) = q.get(kid).cloned() else {
                continue 'kernels;
            };
            match constraint.gate(&entry) {
                Gate::Open => {}
                Gate::Stalled(reason) if constraint.bypass(reason) => {
                    out.bypassed.push((kid, reason));
                    continue 'kernels;
                }
                Gate::Stalled(reason) => {
                    out.halted = Some((kid, reason));
                    break 'kernels;
                }
            }
            match place_block(&entry.demand, sms) {
                Some(sm_id) => {
                    sms[sm_id as usize].allocate(entry.demand);
                    q.take_one(kid);
                    constraint.on_place(&entry);
                    out.placements.push(Placement {
                        kernel: kid,
                        task: entry.task,
                        sm_id,
                    });
                }
                None => {
                    out.blocked = Some(kid);
                    break 'kernels;
                }
            }
        }
    }
    out
}
