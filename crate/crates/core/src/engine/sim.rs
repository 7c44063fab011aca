use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet, VecDeque};

use super::log::{EventKind, EventLog, KernelKey, LogHeader, LogTask};
use super::{Role, Scenario};
use crate::error::SimError;
use crate::mechanisms::{
    admit_process, timeslice_rotate, MechanismConfig, MpsConstraint, ProcessContext, Rotation, SliceConstraint,
    StreamsConstraint, TransferChannel,
};
use crate::preemption::{
    cost_per_sm, hiding_policy_events, preemptible_capacity, select_victims, CurrentKernel, PlanContext,
    PreemptionPlan, PreemptionPolicy, Trigger, UpcomingKernel, VictimCandidate, VictimQuery,
};
use crate::resource::{block_demand, waves, ResourceVector};
use crate::scheduler::{
    dispatch_round, empty_sms, BlockId, BlockPhase, BlockState, DispatchOutcome, DispatchQueue, KernelId,
    QueuedKernel, SmState,
};
use crate::time::SimTime;
use crate::workload::{
    generate_arrivals, transfer_duration, ArrivalMode, ArrivalTime, KernelInvocation, TransferDirection, TransferPosition,
};

#[derive(Debug, Clone, Copy)]
enum Action {
    BlockComplete { block: BlockId, epoch: u32 },
    TransferEnd { transfer: u32 },
    SaveDone { plan: u32 },
    RestoreBlock { block: BlockId },
    RestoreProcess { task: usize },
    SliceExpiry { task: usize, epoch: u32 },
    RequestArrival { task: usize, request: u32 },
    TransferStart { transfer: u32 },
    LaunchNext { task: usize },
    Hiding { key: KernelKey, trigger: Trigger },
}

impl Action {
    /// Same-instant ordering: completions, then slice expiry, then arrivals.
    fn class(&self) -> u8 {
        match self {
            Action::BlockComplete { .. }
            | Action::TransferEnd { .. }
            | Action::SaveDone { .. }
            | Action::RestoreBlock { .. }
            | Action::RestoreProcess { .. } => 0,
            Action::SliceExpiry { .. } => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    time: SimTime,
    class: u8,
    seq: u64,
    action: Action,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Pending {}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pending {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.class, self.seq).cmp(&(other.time, other.class, other.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Idle,
    Transfers,
    Kernel,
    Gap,
    Done,
}

struct TaskRt {
    role: Role,
    rank: i64,
    units: u32,
    unit: u32,
    inv: usize,
    busy: bool,
    stage: Stage,
    pending_transfers: u32,
    current_kernel: Option<KernelId>,
    waiting: VecDeque<u32>,
    completed_units: u32,
    /// (unit, invocation) of the latest kernel to arrive.
    arrived: Option<(u32, u32)>,
    threads_held: u64,
    held: ResourceVector,
}

struct KernelRt {
    key: KernelKey,
    demand: ResourceVector,
    block_ns: u64,
    warps: u32,
    arrival_seq: u64,
    next_fresh: u32,
    checkpointed: VecDeque<BlockId>,
    unfinished: u32,
    blocks: Vec<BlockId>,
    lookahead_done: bool,
}

struct BlockRt {
    state: BlockState,
    task: usize,
    sm: u32,
    rate: f64,
    last_update: SimTime,
    epoch: u32,
    completes_at: SimTime,
    restore_done_at: SimTime,
    needs_restore: bool,
}

struct TransferRt {
    task: usize,
    direction: TransferDirection,
    size_kb: f64,
    duration: SimTime,
    position: TransferPosition,
}

struct PlanRt {
    task: usize,
    blocks: Vec<BlockId>,
    beneficiary: Option<KernelKey>,
    trigger: Option<Trigger>,
    latency: SimTime,
}

#[derive(Default)]
struct SliceState {
    active: Option<usize>,
    loaded: Option<usize>,
    incoming: usize,
    switching: bool,
    expired: bool,
    epoch: u32,
}

pub(super) struct Simulator<'a> {
    s: &'a Scenario,
    now: SimTime,
    heap: BinaryHeap<Reverse<Pending>>,
    seq: u64,
    log: EventLog,
    sms: Vec<SmState>,
    queue: DispatchQueue,
    tasks: Vec<TaskRt>,
    kernels: Vec<KernelRt>,
    blocks: Vec<BlockRt>,
    transfers: Vec<TransferRt>,
    plans: Vec<PlanRt>,
    channel: TransferChannel,
    arrival_seq: u64,
    request_times: Vec<SimTime>,
    inflight: HashSet<KernelKey>,
    withhold: Option<KernelKey>,
    ts: SliceState,
    caps: Vec<u64>,
    reserved: Vec<bool>,
    last_progress: SimTime,
    restore_cost: SimTime,
    save_estimate: SimTime,
    leave_space_threshold: SimTime,
}

fn warps_of(demand: &ResourceVector) -> u32 {
    demand.threads.div_ceil(32)
}

impl<'a> Simulator<'a> {
    pub(super) fn new(s: &'a Scenario) -> Result<Self, SimError> {
        let g = &s.gpu;
        if let MechanismConfig::TimeSlicing { .. } = s.mechanism {
            let mut residents: Vec<ProcessContext> = Vec::new();
            for t in &s.tasks {
                let mut p = ProcessContext::for_trace(&t.trace, g);
                admit_process(&mut p, &residents, g)?;
                residents.push(p);
            }
        }

        let (caps, reserved) = match &s.mechanism {
            MechanismConfig::Mps {
                thread_limit_pct,
                min_reservation,
                ..
            } => (
                thread_limit_pct
                    .iter()
                    .map(|pct| (pct / 100.0 * g.total_threads() as f64).floor() as u64)
                    .collect(),
                min_reservation.iter().map(Option::is_some).collect(),
            ),
            _ => (vec![u64::MAX; s.tasks.len()], vec![false; s.tasks.len()]),
        };
        let rank = |i: usize| -> i64 {
            match &s.mechanism {
                MechanismConfig::PriorityStreams { priorities } => i64::from(priorities[i]),
                MechanismConfig::Mps { .. } if reserved[i] => -1,
                _ => 0,
            }
        };
        let tasks = s
            .tasks
            .iter()
            .enumerate()
            .map(|(i, t)| TaskRt {
                role: t.role,
                rank: rank(i),
                units: match t.role {
                    Role::LatencySensitive => s.arrivals.num_requests,
                    Role::BestEffort => t.iterations,
                },
                unit: 0,
                inv: 0,
                busy: false,
                stage: Stage::Idle,
                pending_transfers: 0,
                current_kernel: None,
                waiting: VecDeque::new(),
                completed_units: 0,
                arrived: None,
                threads_held: 0,
                held: ResourceVector::ZERO,
            })
            .collect();

        let header = LogHeader {
            mechanism: s.mechanism.kind(),
            tasks: s
                .tasks
                .iter()
                .map(|t| LogTask {
                    id: t.trace.task_id.clone(),
                    role: t.role,
                })
                .collect(),
            num_sms: g.num_sms,
            sm_limits: g.sm_limits(),
        };
        let cm = &s.preemption.cost_model;
        Ok(Simulator {
            s,
            now: SimTime::ZERO,
            heap: BinaryHeap::new(),
            seq: 0,
            log: EventLog::new(header),
            sms: empty_sms(g.num_sms, g.sm_limits()),
            queue: DispatchQueue::new(s.leftover_order),
            tasks,
            kernels: Vec::new(),
            blocks: Vec::new(),
            transfers: Vec::new(),
            plans: Vec::new(),
            channel: TransferChannel::new(s.host_bandwidth_gbps),
            arrival_seq: 0,
            request_times: Vec::new(),
            inflight: HashSet::new(),
            withhold: None,
            ts: SliceState::default(),
            caps,
            reserved,
            last_progress: SimTime::ZERO,
            restore_cost: SimTime::from_us(cost_per_sm(cm, g, 1)),
            save_estimate: SimTime::from_us(cost_per_sm(cm, g, g.num_sms)),
            leave_space_threshold: SimTime::from_us(
                s.preemption.leave_space_threshold_us.unwrap_or(s.gap_default_us),
            ),
        })
    }

    fn schedule(&mut self, time: SimTime, action: Action) {
        let p = Pending {
            time,
            class: action.class(),
            seq: self.seq,
            action,
        };
        self.seq += 1;
        self.heap.push(Reverse(p));
    }

    fn emit(&mut self, kind: EventKind) {
        self.log.push(self.now, kind);
    }

    pub(super) fn run(mut self) -> Result<EventLog, SimError> {
        self.start();
        if !self.heap.peek().is_some_and(|Reverse(n)| n.time == self.now) {
            self.dispatch_pass();
        }
        let horizon = SimTime::from_us(self.s.starvation_horizon_us);
        while let Some(Reverse(p)) = self.heap.pop() {
            if p.time > self.now {
                if p.time.saturating_sub(self.last_progress) > horizon {
                    return Err(SimError::Starvation {
                        at_us: self.now.as_us(),
                        detail: format!(
                            "no progress for {} µs; {} kernel(s) waiting for dispatch",
                            (p.time - self.last_progress).as_us(),
                            self.queue.len()
                        ),
                    });
                }
                self.now = p.time;
            }
            self.handle(p.action);
            let more_now = self.heap.peek().is_some_and(|Reverse(n)| n.time == self.now);
            if !more_now {
                self.dispatch_pass();
            }
        }
        if let Some(i) = self.tasks.iter().position(|t| t.stage != Stage::Done) {
            return Err(SimError::Starvation {
                at_us: self.now.as_us(),
                detail: format!(
                    "task '{}' cannot make progress: {} kernel(s) queued that no SM can accept",
                    self.s.tasks[i].trace.task_id,
                    self.queue.len()
                ),
            });
        }
        Ok(self.log)
    }

    fn start(&mut self) {
        for i in 0..self.tasks.len() {
            match self.tasks[i].role {
                Role::BestEffort => {
                    self.tasks[i].busy = true;
                    self.begin_invocation(i);
                }
                Role::LatencySensitive => {
                    let arrivals = generate_arrivals(&self.s.arrivals, self.s.seed);
                    for (r, a) in arrivals.iter().enumerate() {
                        match a {
                            ArrivalTime::At(t) => {
                                self.request_times.push(*t);
                                self.schedule(
                                    *t,
                                    Action::RequestArrival {
                                        task: i,
                                        request: r as u32,
                                    },
                                );
                            }
                            ArrivalTime::AfterPrevious if r == 0 => {
                                self.schedule(SimTime::ZERO, Action::RequestArrival { task: i, request: 0 });
                            }
                            ArrivalTime::AfterPrevious => {}
                        }
                    }
                }
            }
        }
    }

    fn handle(&mut self, action: Action) {
        match action {
            Action::BlockComplete { block, epoch } => {
                let b = &self.blocks[block as usize];
                if b.epoch == epoch && b.state.phase == BlockPhase::Executing {
                    self.complete_block(block);
                }
            }
            Action::TransferStart { transfer } => {
                let t = &self.transfers[transfer as usize];
                let (task, direction, size_kb, end) = (t.task, t.direction, t.size_kb, self.now + t.duration);
                self.emit(EventKind::TransferStart {
                    task,
                    transfer,
                    direction,
                    size_kb,
                });
                self.schedule(end, Action::TransferEnd { transfer });
            }
            Action::TransferEnd { transfer } => self.on_transfer_end(transfer),
            Action::SaveDone { plan } => self.finish_save(plan),
            Action::RestoreBlock { block } => {
                let task = self.blocks[block as usize].task;
                self.emit(EventKind::PreemptRestoreDone {
                    task,
                    block: Some(block),
                    latency_ns: self.restore_cost.ns(),
                });
                self.begin_exec(block);
            }
            Action::RestoreProcess { task } => {
                self.emit(EventKind::PreemptRestoreDone {
                    task,
                    block: None,
                    latency_ns: self.ts_restore_cost().ns(),
                });
                self.ts_activate(task);
            }
            Action::SliceExpiry { task, epoch } => {
                if self.ts.epoch == epoch && !self.ts.switching && self.ts.active == Some(task) {
                    self.emit(EventKind::SliceExpiry { task });
                    self.ts.expired = true;
                }
            }
            Action::RequestArrival { task, request } => {
                self.last_progress = self.now;
                self.emit(EventKind::RequestArrival { task, request });
                self.tasks[task].waiting.push_back(request);
                if !self.tasks[task].busy {
                    self.start_next_request(task);
                }
            }
            Action::LaunchNext { task } => {
                let n = self.s.tasks[task].trace.invocations.len();
                let t = &mut self.tasks[task];
                if t.inv + 1 < n {
                    t.inv += 1;
                } else {
                    t.unit += 1;
                    t.inv = 0;
                }
                self.begin_invocation(task);
            }
            Action::Hiding { key, trigger } => self.on_hiding(key, trigger),
        }
    }

    // ---- task lifecycle ----

    fn invocation(&self, task: usize, inv: usize) -> &'a KernelInvocation {
        &self.s.tasks[task].trace.invocations[inv]
    }

    fn gap_after(&self, task: usize, inv: usize) -> SimTime {
        SimTime::from_us(self.invocation(task, inv).gap_after_us.unwrap_or(self.s.gap_default_us))
    }

    fn start_next_request(&mut self, task: usize) {
        let Some(r) = self.tasks[task].waiting.pop_front() else {
            return;
        };
        let t = &mut self.tasks[task];
        t.unit = r;
        t.inv = 0;
        t.busy = true;
        self.begin_invocation(task);
    }

    fn begin_invocation(&mut self, task: usize) {
        let n = self.submit_transfers(task, TransferPosition::BeforeKernel);
        if n == 0 {
            self.kernel_arrival(task);
        } else {
            self.tasks[task].stage = Stage::Transfers;
            self.tasks[task].pending_transfers = n;
        }
    }

    fn submit_transfers(&mut self, task: usize, pos: TransferPosition) -> u32 {
        let inv = self.invocation(task, self.tasks[task].inv);
        let mut n = 0;
        for op in inv.transfers_at(pos) {
            let (start, end) = self.channel.submit(op.direction, op.size_kb, self.now);
            let id = self.transfers.len() as u32;
            self.transfers.push(TransferRt {
                task,
                direction: op.direction,
                size_kb: op.size_kb,
                duration: end - start,
                position: pos,
            });
            self.schedule(start, Action::TransferStart { transfer: id });
            n += 1;
        }
        n
    }

    fn on_transfer_end(&mut self, transfer: u32) {
        self.last_progress = self.now;
        let (task, pos) = {
            let t = &self.transfers[transfer as usize];
            (t.task, t.position)
        };
        self.emit(EventKind::TransferEnd { task, transfer });
        let t = &mut self.tasks[task];
        t.pending_transfers -= 1;
        if t.pending_transfers == 0 {
            match pos {
                TransferPosition::BeforeKernel => self.kernel_arrival(task),
                TransferPosition::AfterKernel => self.after_kernel_done(task),
            }
        }
    }

    fn kernel_arrival(&mut self, task: usize) {
        self.last_progress = self.now;
        let (unit, inv) = (self.tasks[task].unit, self.tasks[task].inv);
        let desc = &self.invocation(task, inv).kernel;
        let demand = block_demand(desc);
        let w = waves(desc, &self.s.gpu).max(1);
        let iso_ns = SimTime::from_us(desc.isolated_duration_us).ns();
        let block_ns = ((iso_ns as f64) / (w as f64)).round().max(1.0) as u64;
        let kid = self.kernels.len() as KernelId;
        let key = KernelKey {
            task,
            unit,
            invocation: inv as u32,
        };
        let arrival_seq = self.arrival_seq;
        self.arrival_seq += 1;
        self.kernels.push(KernelRt {
            key,
            demand,
            block_ns,
            warps: warps_of(&demand),
            arrival_seq,
            next_fresh: 0,
            checkpointed: VecDeque::new(),
            unfinished: desc.grid_blocks,
            blocks: Vec::new(),
            lookahead_done: false,
        });
        self.queue.push(QueuedKernel {
            kernel: kid,
            task,
            arrival_seq,
            demand,
            undispatched: desc.grid_blocks,
        });
        let t = &mut self.tasks[task];
        t.current_kernel = Some(kid);
        t.arrived = Some((unit, inv as u32));
        t.stage = Stage::Kernel;
        self.emit(EventKind::KernelArrival {
            key,
            kernel: kid,
            grid_blocks: desc.grid_blocks,
            demand,
            block_ns,
        });
    }

    fn kernel_complete(&mut self, kid: KernelId) {
        let key = self.kernels[kid as usize].key;
        self.emit(EventKind::KernelComplete { kernel: kid, key });
        let task = key.task;
        self.tasks[task].current_kernel = None;
        let n = self.submit_transfers(task, TransferPosition::AfterKernel);
        if n == 0 {
            self.after_kernel_done(task);
        } else {
            self.tasks[task].stage = Stage::Transfers;
            self.tasks[task].pending_transfers = n;
        }
    }

    fn after_kernel_done(&mut self, task: usize) {
        let n = self.s.tasks[task].trace.invocations.len();
        let (unit, inv, units) = (self.tasks[task].unit, self.tasks[task].inv, self.tasks[task].units);
        if inv + 1 < n {
            self.tasks[task].stage = Stage::Gap;
            let at = self.now + self.gap_after(task, inv);
            self.schedule(at, Action::LaunchNext { task });
            return;
        }
        match self.tasks[task].role {
            Role::LatencySensitive => {
                self.emit(EventKind::RequestComplete { task, request: unit });
                let single_stream = self.s.arrivals.mode == ArrivalMode::SingleStream;
                let t = &mut self.tasks[task];
                t.busy = false;
                t.completed_units += 1;
                t.stage = Stage::Idle;
                if t.completed_units == units {
                    t.stage = Stage::Done;
                    self.emit(EventKind::TaskComplete { task });
                    return;
                }
                if single_stream && unit + 1 < units {
                    self.schedule(
                        self.now,
                        Action::RequestArrival {
                            task,
                            request: unit + 1,
                        },
                    );
                }
                self.start_next_request(task);
            }
            Role::BestEffort => {
                if unit + 1 < units {
                    self.tasks[task].stage = Stage::Gap;
                    let at = self.now + self.gap_after(task, inv);
                    self.schedule(at, Action::LaunchNext { task });
                } else {
                    self.tasks[task].stage = Stage::Done;
                    self.tasks[task].busy = false;
                    self.emit(EventKind::TaskComplete { task });
                }
            }
        }
    }

    // ---- block execution ----

    fn start_block(&mut self, kid: KernelId, sm: u32) {
        self.last_progress = self.now;
        let k = &mut self.kernels[kid as usize];
        let task = k.key.task;
        let demand = k.demand;
        let (bid, restore) = match k.checkpointed.pop_front() {
            Some(b) => (b, self.blocks[b as usize].needs_restore),
            None => {
                let index = k.next_fresh;
                k.next_fresh += 1;
                let bid = self.blocks.len() as BlockId;
                k.blocks.push(bid);
                self.blocks.push(BlockRt {
                    state: BlockState {
                        kernel: kid,
                        block_index: index,
                        sm_id: None,
                        phase: BlockPhase::Pending,
                        remaining_work: k.block_ns as f64,
                        preempt_count: 0,
                    },
                    task,
                    sm,
                    rate: 1.0,
                    last_update: self.now,
                    epoch: 0,
                    completes_at: SimTime::ZERO,
                    restore_done_at: SimTime::ZERO,
                    needs_restore: false,
                });
                (bid, false)
            }
        };
        self.sms[sm as usize].resident.push(bid);
        let t = &mut self.tasks[task];
        t.held += demand;
        t.threads_held += u64::from(demand.threads);
        let b = &mut self.blocks[bid as usize];
        b.sm = sm;
        b.state.sm_id = Some(sm);
        let index = b.state.block_index;
        self.emit(EventKind::BlockDispatch {
            kernel: kid,
            block: bid,
            index,
            sm,
            restore,
        });
        if restore {
            let b = &mut self.blocks[bid as usize];
            b.state.phase = BlockPhase::Restoring;
            b.needs_restore = false;
            b.restore_done_at = self.now + self.restore_cost;
            let at = b.restore_done_at;
            self.schedule(at, Action::RestoreBlock { block: bid });
        } else {
            self.begin_exec(bid);
        }
    }

    fn begin_exec(&mut self, bid: BlockId) {
        let b = &mut self.blocks[bid as usize];
        b.state.phase = BlockPhase::Executing;
        b.last_update = self.now;
        b.rate = 1.0;
        let sm = b.sm;
        self.schedule_completion(bid);
        if self.s.contention_alpha > 0.0 {
            self.refresh_sm(sm);
        }
    }

    fn schedule_completion(&mut self, bid: BlockId) {
        let b = &mut self.blocks[bid as usize];
        b.epoch += 1;
        let dur = (b.state.remaining_work / b.rate).ceil() as u64;
        b.completes_at = self.now + SimTime(dur);
        let (at, epoch) = (b.completes_at, b.epoch);
        self.schedule(at, Action::BlockComplete { block: bid, epoch });
    }

    fn advance(&mut self, bid: BlockId) {
        let now = self.now;
        let b = &mut self.blocks[bid as usize];
        if b.state.phase == BlockPhase::Executing {
            let elapsed = (now - b.last_update).ns() as f64;
            b.state.remaining_work = (b.state.remaining_work - elapsed * b.rate).max(0.0);
        }
        b.last_update = now;
    }

    /// Re-rates every executing block on `sm` after its mix of tasks changed.
    fn refresh_sm(&mut self, sm: u32) {
        let alpha = self.s.contention_alpha;
        let exec: Vec<BlockId> = self.sms[sm as usize]
            .resident
            .iter()
            .copied()
            .filter(|&b| self.blocks[b as usize].state.phase == BlockPhase::Executing)
            .collect();
        let warps = |b: BlockId| self.kernels[self.blocks[b as usize].state.kernel as usize].warps;
        let total: u32 = exec.iter().map(|&b| warps(b)).sum();
        let rates: Vec<f64> = exec
            .iter()
            .map(|&b| {
                let task = self.blocks[b as usize].task;
                let own: u32 = exec
                    .iter()
                    .filter(|&&o| self.blocks[o as usize].task == task)
                    .map(|&o| warps(o))
                    .sum();
                let foreign = f64::from(total - own) / f64::from(total.max(1));
                1.0 / (1.0 + alpha * foreign)
            })
            .collect();
        for (b, rate) in exec.into_iter().zip(rates) {
            if self.blocks[b as usize].rate != rate {
                self.advance(b);
                self.blocks[b as usize].rate = rate;
                self.schedule_completion(b);
            }
        }
    }

    fn release_block(&mut self, bid: BlockId) {
        let (kernel, sm, task) = {
            let b = &self.blocks[bid as usize];
            (b.state.kernel, b.sm, b.task)
        };
        let demand = self.kernels[kernel as usize].demand;
        let s = &mut self.sms[sm as usize];
        s.release(demand);
        if let Some(pos) = s.resident.iter().position(|&x| x == bid) {
            s.resident.remove(pos);
        }
        let t = &mut self.tasks[task];
        t.held -= demand;
        t.threads_held -= u64::from(demand.threads);
        self.blocks[bid as usize].state.sm_id = None;
    }

    fn complete_block(&mut self, bid: BlockId) {
        self.last_progress = self.now;
        let (kid, sm) = {
            let b = &mut self.blocks[bid as usize];
            b.state.phase = BlockPhase::Done;
            b.state.remaining_work = 0.0;
            (b.state.kernel, b.sm)
        };
        self.release_block(bid);
        self.emit(EventKind::BlockComplete {
            kernel: kid,
            block: bid,
            sm,
        });
        if self.s.contention_alpha > 0.0 {
            self.refresh_sm(sm);
        }
        let k = &mut self.kernels[kid as usize];
        k.unfinished -= 1;
        if k.unfinished == 0 {
            self.kernel_complete(kid);
        }
    }

    fn checkpoint_block(&mut self, bid: BlockId) {
        self.advance(bid);
        let b = &mut self.blocks[bid as usize];
        b.state.phase = BlockPhase::Saving;
        b.epoch += 1;
        let (kernel, sm, remaining_ns) = (b.state.kernel, b.sm, b.state.remaining_work);
        self.emit(EventKind::BlockCheckpoint {
            kernel,
            block: bid,
            sm,
            remaining_ns,
        });
        if self.s.contention_alpha > 0.0 {
            self.refresh_sm(sm);
        }
    }

    // ---- dispatch ----

    fn withheld_flags(&self) -> Vec<bool> {
        match self.withhold {
            Some(key) => {
                let r = self.tasks[key.task].rank;
                self.tasks.iter().map(|t| t.rank > r).collect()
            }
            None => vec![false; self.tasks.len()],
        }
    }

    fn round(&mut self) -> DispatchOutcome {
        let withheld = self.withheld_flags();
        match &self.s.mechanism {
            MechanismConfig::PriorityStreams { priorities } => dispatch_round(
                &mut self.queue,
                &mut self.sms,
                &mut StreamsConstraint {
                    priorities,
                    withheld: &withheld,
                },
            ),
            MechanismConfig::Mps {
                strict_head_of_line, ..
            } => dispatch_round(
                &mut self.queue,
                &mut self.sms,
                &mut MpsConstraint {
                    cap_threads: &self.caps,
                    usage_threads: self.tasks.iter().map(|t| t.threads_held).collect(),
                    reserved: &self.reserved,
                    withheld: &withheld,
                    strict_head_of_line: *strict_head_of_line,
                },
            ),
            MechanismConfig::TimeSlicing { .. } => {
                let active = if self.ts.switching { None } else { self.ts.active };
                dispatch_round(&mut self.queue, &mut self.sms, &mut SliceConstraint { active })
            }
        }
    }

    fn dispatch_pass(&mut self) {
        loop {
            if matches!(self.s.mechanism, MechanismConfig::TimeSlicing { .. }) {
                self.ts_step();
            }
            let out = self.round();
            let mut touched: Vec<KernelId> = Vec::new();
            for p in &out.placements {
                self.start_block(p.kernel, p.sm_id);
                if touched.last() != Some(&p.kernel) {
                    touched.push(p.kernel);
                }
            }
            if let Some(k) = out.blocked {
                self.preempt_on_arrival(k);
            }
            touched.sort_unstable();
            touched.dedup();
            for k in touched {
                if self.queue.get(k).is_none() {
                    self.lookahead(k);
                }
            }
            if !self.release_withhold() {
                break;
            }
        }
    }

    // ---- fine-grained preemption ----

    fn can_preempt(&self, task: usize) -> bool {
        let r = self.tasks[task].rank;
        self.s.preemption.enabled && self.tasks.iter().any(|t| t.rank > r)
    }

    fn candidates(&self, rank: i64) -> Vec<VictimCandidate> {
        let mut out = Vec::new();
        for sm in &self.sms {
            for &bid in &sm.resident {
                let b = &self.blocks[bid as usize];
                if b.state.phase != BlockPhase::Executing || self.tasks[b.task].rank <= rank {
                    continue;
                }
                let elapsed = (self.now - b.last_update).ns() as f64;
                out.push(VictimCandidate {
                    block: bid,
                    sm_id: sm.sm_id,
                    task: b.task,
                    demand: self.kernels[b.state.kernel as usize].demand,
                    remaining_work: (b.state.remaining_work - elapsed * b.rate).max(0.0),
                });
            }
        }
        out
    }

    /// Blocks of `demand` the task may still add under its MPS cap and
    /// reservation.
    fn mps_allowance(&self, task: usize, demand: &ResourceVector) -> u64 {
        let MechanismConfig::Mps { min_reservation, .. } = &self.s.mechanism else {
            return u64::MAX;
        };
        let t = &self.tasks[task];
        let mut limit = match demand.threads {
            0 => u64::MAX,
            th => self.caps[task].saturating_sub(t.threads_held) / u64::from(th),
        };
        if let Some(r) = min_reservation[task] {
            let headroom = ResourceVector::new(
                if r.threads > 0 { r.threads.saturating_sub(t.held.threads) } else { u32::MAX },
                if r.blocks > 0 { r.blocks.saturating_sub(t.held.blocks) } else { u32::MAX },
                if r.registers > 0 { r.registers.saturating_sub(t.held.registers) } else { u32::MAX },
                if r.shared_mem_kb > 0 { r.shared_mem_kb.saturating_sub(t.held.shared_mem_kb) } else { u32::MAX },
            );
            if let Some(c) = headroom.copies_of(demand) {
                limit = limit.min(u64::from(c));
            }
        }
        limit
    }

    fn plan_for(
        &self,
        task: usize,
        demand: ResourceVector,
        wanted: u32,
        extra: Option<&[ResourceVector]>,
        trigger: Trigger,
    ) -> Option<PreemptionPlan> {
        let rank = self.tasks[task].rank;
        let ranks: Vec<i64> = self.tasks.iter().map(|t| t.rank).collect();
        let protected = |t: usize| ranks[t] <= rank;
        let cands = self.candidates(rank);
        let mut q = VictimQuery {
            demand,
            count: 0,
            sms: &self.sms,
            extra_free: extra,
        };
        let cap = preemptible_capacity(&q, &cands, &protected);
        let count = u64::from(wanted).min(cap).min(self.mps_allowance(task, &demand));
        if count == 0 {
            return None;
        }
        q.count = count as u32;
        select_victims(&q, &cands, &protected, &self.s.preemption.cost_model, &self.s.gpu, trigger)
            .filter(|p| !p.victims.is_empty())
    }

    fn enact(&mut self, plan: PreemptionPlan, task: usize, beneficiary: KernelKey) {
        let id = self.plans.len() as u32;
        for &v in &plan.victims {
            self.checkpoint_block(v);
        }
        self.inflight.insert(beneficiary);
        self.plans.push(PlanRt {
            task,
            blocks: plan.victims,
            beneficiary: Some(beneficiary),
            trigger: Some(plan.trigger),
            latency: plan.save_latency,
        });
        self.schedule(self.now + plan.save_latency, Action::SaveDone { plan: id });
    }

    fn finish_save(&mut self, plan: u32) {
        let p = &self.plans[plan as usize];
        let blocks = p.blocks.clone();
        let fine_grained = p.trigger.is_some();
        for &bid in &blocks {
            self.release_block(bid);
            let b = &mut self.blocks[bid as usize];
            b.state.phase = BlockPhase::Checkpointed;
            b.state.preempt_count += 1;
            b.needs_restore = fine_grained;
            let (kid, task) = (b.state.kernel, b.task);
            let k = &mut self.kernels[kid as usize];
            k.checkpointed.push_back(bid);
            let (arrival_seq, demand) = (k.arrival_seq, k.demand);
            self.queue.push(QueuedKernel {
                kernel: kid,
                task,
                arrival_seq,
                demand,
                undispatched: 1,
            });
        }
        let p = &self.plans[plan as usize];
        let kind = EventKind::PreemptSaveDone {
            plan,
            task: p.task,
            beneficiary: p.beneficiary,
            trigger: p.trigger,
            blocks,
            latency_ns: p.latency.ns(),
        };
        let beneficiary = p.beneficiary;
        self.emit(kind);
        if let Some(key) = beneficiary {
            self.inflight.remove(&key);
        }
        if !fine_grained {
            self.ts_after_save();
        }
    }

    fn preempt_on_arrival(&mut self, kid: KernelId) {
        let k = &self.kernels[kid as usize];
        let (key, demand) = (k.key, k.demand);
        if !self.can_preempt(key.task) || self.inflight.contains(&key) {
            return;
        }
        let wanted = self.queue.get(kid).map_or(0, |e| e.undispatched);
        if let Some(plan) = self.plan_for(key.task, demand, wanted, None, Trigger::OnArrival) {
            self.enact(plan, key.task, key);
        }
    }

    /// Resources per SM held by the task's running kernel.
    fn held_by_current(&self, task: usize) -> Vec<ResourceVector> {
        let mut out = vec![ResourceVector::ZERO; self.sms.len()];
        if let Some(kid) = self.tasks[task].current_kernel {
            let k = &self.kernels[kid as usize];
            for &bid in &k.blocks {
                let b = &self.blocks[bid as usize];
                if b.state.sm_id.is_some() {
                    out[b.sm as usize] += k.demand;
                }
            }
        }
        out
    }

    fn before_transfer_time(&self, task: usize, inv: usize) -> (SimTime, bool) {
        let mut total = SimTime::ZERO;
        let mut h2d = false;
        for op in self.invocation(task, inv).transfers_at(TransferPosition::BeforeKernel) {
            total += transfer_duration(op.size_kb, self.s.host_bandwidth_gbps);
            h2d |= op.direction == TransferDirection::HostToDevice;
        }
        (total, h2d)
    }

    /// Key, expected arrival and transfer start of the kernel after the
    /// task's current one, assuming the current one ends at `completion`.
    fn upcoming_after(&self, task: usize, completion: SimTime) -> Option<(KernelKey, UpcomingKernel)> {
        let t = &self.tasks[task];
        let n = self.s.tasks[task].trace.invocations.len();
        let after: SimTime = self
            .invocation(task, t.inv)
            .transfers_at(TransferPosition::AfterKernel)
            .map(|op| transfer_duration(op.size_kb, self.s.host_bandwidth_gbps))
            .fold(SimTime::ZERO, |a, b| a + b);
        let (unit, inv, start) = if t.inv + 1 < n {
            (t.unit, t.inv + 1, completion + after + self.gap_after(task, t.inv))
        } else if t.unit + 1 < t.units {
            let ready = completion + after;
            let start = match self.request_times.get(t.unit as usize + 1) {
                Some(&a) => a.max(ready),
                None => ready,
            };
            (t.unit + 1, 0, start)
        } else {
            return None;
        };
        let (before, h2d) = self.before_transfer_time(task, inv);
        let desc = &self.invocation(task, inv).kernel;
        let demand = block_demand(desc);
        let held = self.held_by_current(task);
        let room: u64 = self
            .sms
            .iter()
            .zip(&held)
            .map(|(sm, h)| (sm.free + *h).copies_of(&demand).map_or(u64::MAX / 4, u64::from))
            .sum();
        Some((
            KernelKey {
                task,
                unit,
                invocation: inv as u32,
            },
            UpcomingKernel {
                expected_arrival: start + before,
                h2d_transfer_start: h2d.then_some(start),
                fits_without_preemption: room >= u64::from(desc.grid_blocks),
            },
        ))
    }

    fn lookahead(&mut self, kid: KernelId) {
        let policy = self.s.preemption.policy;
        let k = &mut self.kernels[kid as usize];
        if k.lookahead_done || policy == PreemptionPolicy::OnArrival {
            return;
        }
        k.lookahead_done = true;
        let task = k.key.task;
        if self.tasks[task].role != Role::LatencySensitive
            || !self.can_preempt(task)
            || self.tasks[task].current_kernel != Some(kid)
        {
            return;
        }
        let k = &self.kernels[kid as usize];
        let completion = k
            .blocks
            .iter()
            .map(|&bid| {
                let b = &self.blocks[bid as usize];
                match b.state.phase {
                    BlockPhase::Executing => b.completes_at,
                    BlockPhase::Restoring => b.restore_done_at + SimTime(b.state.remaining_work.ceil() as u64),
                    _ => self.now,
                }
            })
            .max()
            .unwrap_or(self.now)
            .max(self.now);
        let Some((key, up)) = self.upcoming_after(task, completion) else {
            return;
        };
        let ctx = PlanContext {
            policy,
            now: self.now,
            save_estimate: self.save_estimate,
            leave_space_threshold: self.leave_space_threshold,
        };
        let cur = CurrentKernel {
            expected_completion: completion,
        };
        for ev in hiding_policy_events(Some(&up), Some(&cur), &ctx) {
            self.schedule(
                ev.at,
                Action::Hiding {
                    key,
                    trigger: ev.trigger,
                },
            );
        }
    }

    fn on_hiding(&mut self, key: KernelKey, trigger: Trigger) {
        let task = key.task;
        if self.tasks[task].arrived.is_some_and(|a| a >= (key.unit, key.invocation)) {
            return;
        }
        if matches!(trigger, Trigger::PreDrain | Trigger::TransferOverlap) && !self.inflight.contains(&key) {
            let desc = &self.invocation(task, key.invocation as usize).kernel;
            let demand = block_demand(desc);
            let held = self.held_by_current(task);
            if let Some(plan) = self.plan_for(task, demand, desc.grid_blocks, Some(&held), trigger) {
                self.enact(plan, task, key);
            }
        }
        if self.withhold != Some(key) {
            self.withhold = Some(key);
            self.emit(EventKind::Withhold {
                task,
                target: key,
                trigger,
            });
        }
    }

    /// Ends withholding once the protected kernel has had a dispatch round.
    fn release_withhold(&mut self) -> bool {
        let Some(key) = self.withhold else {
            return false;
        };
        let t = &self.tasks[key.task];
        let reached = t.arrived.is_some_and(|a| a >= (key.unit, key.invocation));
        if reached || t.stage == Stage::Done {
            self.withhold = None;
            self.emit(EventKind::WithholdRelease { task: key.task });
            return true;
        }
        false
    }

    // ---- time-slicing ----

    fn ts_costs(&self) -> (SimTime, SimTime, SimTime) {
        match &self.s.mechanism {
            MechanismConfig::TimeSlicing {
                slice_length_us,
                ctx_save_cost_us,
                ctx_restore_cost_us,
            } => (
                SimTime::from_us(*slice_length_us),
                SimTime::from_us(*ctx_save_cost_us),
                SimTime::from_us(*ctx_restore_cost_us),
            ),
            _ => (SimTime::ZERO, SimTime::ZERO, SimTime::ZERO),
        }
    }

    fn ts_restore_cost(&self) -> SimTime {
        self.ts_costs().2
    }

    fn ts_step(&mut self) {
        if self.ts.switching {
            return;
        }
        let ready: Vec<bool> = self.tasks.iter().map(|t| t.current_kernel.is_some()).collect();
        match timeslice_rotate(self.ts.active, &ready, self.ts.expired) {
            Rotation::Stay => {
                if self.ts.expired {
                    self.ts.expired = false;
                    self.start_slice();
                }
            }
            Rotation::Idle => {}
            Rotation::SwitchTo(p) => self.begin_switch(p),
        }
    }

    fn begin_switch(&mut self, incoming: usize) {
        let outgoing = self.ts.active;
        self.ts.active = None;
        self.ts.switching = true;
        self.ts.incoming = incoming;
        self.ts.expired = false;
        self.ts.epoch += 1;
        let victims: Vec<BlockId> = match outgoing {
            Some(o) => self
                .sms
                .iter()
                .flat_map(|sm| sm.resident.iter().copied())
                .filter(|&b| {
                    let b = &self.blocks[b as usize];
                    b.task == o && b.state.phase == BlockPhase::Executing
                })
                .collect(),
            None => Vec::new(),
        };
        if victims.is_empty() {
            self.ts_after_save();
            return;
        }
        for &v in &victims {
            self.checkpoint_block(v);
        }
        let save = self.ts_costs().1;
        let id = self.plans.len() as u32;
        self.plans.push(PlanRt {
            task: outgoing.expect("victims imply an outgoing process"),
            blocks: victims,
            beneficiary: None,
            trigger: None,
            latency: save,
        });
        self.schedule(self.now + save, Action::SaveDone { plan: id });
    }

    fn ts_after_save(&mut self) {
        let p = self.ts.incoming;
        match self.ts.loaded {
            Some(l) if l != p => {
                let at = self.now + self.ts_restore_cost();
                self.schedule(at, Action::RestoreProcess { task: p });
            }
            _ => self.ts_activate(p),
        }
    }

    fn ts_activate(&mut self, p: usize) {
        self.ts.loaded = Some(p);
        self.ts.active = Some(p);
        self.ts.switching = false;
        self.start_slice();
    }

    fn start_slice(&mut self) {
        if self.tasks.len() < 2 {
            return;
        }
        let Some(task) = self.ts.active else {
            return;
        };
        self.ts.epoch += 1;
        let at = self.now + self.ts_costs().0;
        let epoch = self.ts.epoch;
        self.schedule(at, Action::SliceExpiry { task, epoch });
    }
}
