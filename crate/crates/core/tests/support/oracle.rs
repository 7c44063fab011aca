//! Brute-force reference simulator: advances a clock one microsecond at a
//! time and re-derives every scheduling decision from scratch each tick.
//! Shares no scheduling code with the engine; only the scenario types are
//! reused as input.

use rand::Rng;

use blocksim::engine::{EventKind, EventLog, Role, Scenario, TaskSpec};
use blocksim::mechanisms::MechanismConfig;
use blocksim::resource::{GpuConfig, KernelDescriptor};
use blocksim::scheduler::LeftoverOrder;
use blocksim::workload::{ArrivalMode, ArrivalPattern, KernelInvocation, TaskKind, TaskTrace};

/// (time µs, task, unit, invocation, sm)
pub type Stamp = (u64, usize, u32, u32, u32);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub dispatches: Vec<Stamp>,
    pub completions: Vec<Stamp>,
}

impl Schedule {
    fn sorted(mut self) -> Self {
        self.dispatches.sort_unstable();
        self.completions.sort_unstable();
        self
    }
}

type Res = [u64; 4];

fn demand_of(k: &KernelDescriptor) -> Res {
    let t = u64::from(k.threads_per_block);
    [t, 1, t * u64::from(k.regs_per_thread), u64::from(k.shared_mem_per_block_kb)]
}

fn limits_of(g: &GpuConfig) -> Res {
    [
        u64::from(g.threads_per_sm),
        u64::from(g.blocks_per_sm),
        u64::from(g.registers_per_sm),
        u64::from(g.shared_mem_per_sm_kb),
    ]
}

fn fits(d: &Res, free: &Res) -> bool {
    d.iter().zip(free).all(|(a, b)| a <= b)
}

/// Largest k with k copies of the block fitting an empty SM, by counting.
pub fn brute_max_resident(k: &KernelDescriptor, g: &GpuConfig) -> u64 {
    let d = demand_of(k);
    let lim = limits_of(g);
    let mut n = 0;
    while fits(&d.map(|x| x * (n + 1)), &lim) {
        n += 1;
    }
    n
}

pub fn brute_waves(k: &KernelDescriptor, g: &GpuConfig) -> u64 {
    let per_wave = u64::from(g.num_sms) * brute_max_resident(k, g);
    u64::from(k.grid_blocks).div_ceil(per_wave)
}

struct Queued {
    task: usize,
    unit: u32,
    inv: u32,
    order: u64,
    left: u32,
    demand: Res,
    block_us: u64,
}

struct Running {
    end: u64,
    order: u64,
    task: usize,
    unit: u32,
    inv: u32,
    sm: usize,
    demand: Res,
}

struct Due {
    at: u64,
    order: u64,
    task: usize,
    unit: u32,
    inv: u32,
}

fn whole_us(x: f64) -> u64 {
    assert!(x >= 0.0 && x.fract() == 0.0, "oracle needs whole microseconds, got {x}");
    x as u64
}

/// Simulates `s` tick by tick. Supports streams and MPS without
/// preemption, transfers or contention; single-stream requests only.
pub fn simulate(s: &Scenario) -> Schedule {
    assert_eq!(s.contention_alpha, 0.0);
    assert!(!s.preemption.enabled);
    assert_eq!(s.arrivals.mode, ArrivalMode::SingleStream);
    let g = &s.gpu;
    let n_tasks = s.tasks.len();
    let limits = limits_of(g);
    let mut free = vec![limits; g.num_sms as usize];

    // rank per task; MPS caps in threads
    let (rank, caps): (Vec<i64>, Vec<u64>) = match &s.mechanism {
        MechanismConfig::PriorityStreams { priorities } => {
            (priorities.iter().map(|&p| i64::from(p)).collect(), vec![u64::MAX; n_tasks])
        }
        MechanismConfig::Mps { thread_limit_pct, .. } => {
            let total = u64::from(g.num_sms) * u64::from(g.threads_per_sm);
            (
                vec![0; n_tasks],
                thread_limit_pct
                    .iter()
                    .map(|&p| {
                        assert_eq!(p.fract(), 0.0);
                        p as u64 * total / 100
                    })
                    .collect(),
            )
        }
        MechanismConfig::TimeSlicing { .. } => panic!("oracle does not model time-slicing"),
    };
    let units: Vec<u32> = s
        .tasks
        .iter()
        .map(|t| match t.role {
            Role::LatencySensitive => s.arrivals.num_requests,
            Role::BestEffort => t.iterations,
        })
        .collect();

    let mut counter = 0u64;
    let mut next = || {
        counter += 1;
        counter
    };
    let mut due: Vec<Due> = Vec::new();
    for (i, t) in s.tasks.iter().enumerate() {
        if t.role == Role::BestEffort {
            due.push(Due { at: 0, order: next(), task: i, unit: 0, inv: 0 });
        }
    }
    for (i, t) in s.tasks.iter().enumerate() {
        if t.role == Role::LatencySensitive {
            due.push(Due { at: 0, order: next(), task: i, unit: 0, inv: 0 });
        }
    }

    let mut queue: Vec<Queued> = Vec::new();
    let mut running: Vec<Running> = Vec::new();
    let mut unfinished: Vec<u32> = vec![0; n_tasks];
    let mut done = vec![false; n_tasks];
    let mut usage = vec![0u64; n_tasks];
    let mut out = Schedule {
        dispatches: Vec::new(),
        completions: Vec::new(),
    };

    let mut t = 0u64;
    while !done.iter().all(|&d| d) {
        assert!(t < 10_000_000, "oracle did not finish");

        // completions, in dispatch order
        let mut ending: Vec<Running> = Vec::new();
        let mut i = 0;
        while i < running.len() {
            if running[i].end == t {
                ending.push(running.swap_remove(i));
            } else {
                i += 1;
            }
        }
        ending.sort_by_key(|r| r.order);
        for r in ending {
            for (f, d) in free[r.sm].iter_mut().zip(r.demand) {
                *f += d;
            }
            usage[r.task] -= r.demand[0];
            out.completions.push((t, r.task, r.unit, r.inv, r.sm as u32));
            unfinished[r.task] -= 1;
            if unfinished[r.task] > 0 {
                continue;
            }
            let invs = &s.tasks[r.task].trace.invocations;
            let gap = whole_us(invs[r.inv as usize].gap_after_us.unwrap_or(s.gap_default_us));
            if (r.inv as usize) + 1 < invs.len() {
                due.push(Due { at: t + gap, order: next(), task: r.task, unit: r.unit, inv: r.inv + 1 });
            } else if r.unit + 1 < units[r.task] {
                let at = match s.tasks[r.task].role {
                    Role::LatencySensitive => t,
                    Role::BestEffort => t + gap,
                };
                due.push(Due { at, order: next(), task: r.task, unit: r.unit + 1, inv: 0 });
            } else {
                done[r.task] = true;
            }
        }

        // arrivals due now, in creation order
        due.sort_by_key(|d| (d.at, d.order));
        while due.first().is_some_and(|d| d.at == t) {
            let d = due.remove(0);
            let k = &s.tasks[d.task].trace.invocations[d.inv as usize].kernel;
            let waves = brute_waves(k, g);
            let iso = whole_us(k.isolated_duration_us);
            assert_eq!(iso % waves, 0, "oracle needs block durations in whole microseconds");
            unfinished[d.task] = k.grid_blocks;
            queue.push(Queued {
                task: d.task,
                unit: d.unit,
                inv: d.inv,
                order: next(),
                left: k.grid_blocks,
                demand: demand_of(k),
                block_us: iso / waves,
            });
        }

        // one dispatch round
        let mut order: Vec<usize> = (0..queue.len()).collect();
        order.sort_by_key(|&i| {
            let leftover = match s.leftover_order {
                LeftoverOrder::Fifo => queue[i].order as i64,
                LeftoverOrder::Lifo => -(queue[i].order as i64),
            };
            (rank[queue[i].task], leftover)
        });
        'round: for qi in order {
            while queue[qi].left > 0 {
                let q = &queue[qi];
                if usage[q.task] + q.demand[0] > caps[q.task] {
                    continue 'round;
                }
                let mut best: Option<usize> = None;
                for sm in 0..free.len() {
                    if !fits(&q.demand, &free[sm]) {
                        continue;
                    }
                    let key = |i: usize| (free[i][0], free[i][2], free[i][3]);
                    if best.is_none_or(|b| key(sm) > key(b)) {
                        best = Some(sm);
                    }
                }
                let Some(sm) = best else { break 'round };
                for (f, d) in free[sm].iter_mut().zip(q.demand) {
                    *f -= d;
                }
                usage[q.task] += q.demand[0];
                out.dispatches.push((t, q.task, q.unit, q.inv, sm as u32));
                running.push(Running {
                    end: t + q.block_us,
                    order: next(),
                    task: q.task,
                    unit: q.unit,
                    inv: q.inv,
                    sm,
                    demand: q.demand,
                });
                queue[qi].left -= 1;
            }
        }
        queue.retain(|q| q.left > 0);
        t += 1;
    }
    out.sorted()
}

/// The engine's log in the oracle's terms.
pub fn schedule_of(log: &EventLog) -> Schedule {
    let mut key_of = std::collections::HashMap::new();
    let mut out = Schedule {
        dispatches: Vec::new(),
        completions: Vec::new(),
    };
    for e in &log.events {
        let ns = e.time.ns();
        let us = || {
            assert_eq!(ns % 1000, 0, "event off the microsecond grid: {e}");
            ns / 1000
        };
        match &e.kind {
            EventKind::KernelArrival { key, kernel, .. } => {
                key_of.insert(*kernel, *key);
            }
            EventKind::BlockDispatch { kernel, sm, .. } => {
                let k = key_of[kernel];
                out.dispatches.push((us(), k.task, k.unit, k.invocation, *sm));
            }
            EventKind::BlockComplete { kernel, sm, .. } => {
                let k = key_of[kernel];
                out.completions.push((us(), k.task, k.unit, k.invocation, *sm));
            }
            _ => {}
        }
    }
    out.sorted()
}

/// A random instance within the oracle's scope: at most 4 SMs, 3 kernels per
/// task and 6 blocks per kernel, whole-microsecond block durations.
pub fn random_instance(rng: &mut impl Rng) -> Scenario {
    let gpu = GpuConfig {
        num_sms: rng.random_range(1..=4),
        threads_per_sm: [512, 1024, 1536][rng.random_range(0..3)],
        blocks_per_sm: rng.random_range(2..=8),
        registers_per_sm: [16384, 32768, 65536][rng.random_range(0..3)],
        shared_mem_per_sm_kb: [48, 96, 164][rng.random_range(0..3)],
        ..GpuConfig::default()
    };
    let n_tasks = rng.random_range(1..=3);
    let ls_task = if rng.random_bool(0.6) { Some(rng.random_range(0..n_tasks)) } else { None };
    let mut tasks = Vec::new();
    for i in 0..n_tasks {
        let n_kernels = rng.random_range(1..=3);
        let mut invs = Vec::new();
        for j in 0..n_kernels {
            let k = loop {
                let mut k = KernelDescriptor::new(
                    format!("k{i}_{j}"),
                    rng.random_range(1..=6),
                    [32, 64, 128, 256, 512][rng.random_range(0..5)],
                    [16, 32, 64][rng.random_range(0..3)],
                    [0, 0, 8, 24][rng.random_range(0..4)],
                    1.0,
                );
                if brute_max_resident(&k, &gpu) == 0 {
                    continue;
                }
                let per_block = rng.random_range(1..=25) as f64;
                k.isolated_duration_us = per_block * brute_waves(&k, &gpu) as f64;
                break k;
            };
            let mut inv = KernelInvocation::new(k);
            if rng.random_bool(0.5) {
                inv = inv.with_gap(rng.random_range(0..=6) as f64);
            }
            invs.push(inv);
        }
        let trace = TaskTrace {
            task_id: format!("t{i}"),
            kind: if ls_task == Some(i) { TaskKind::Inference } else { TaskKind::Training },
            invocations: invs,
            global_mem_alloc_mb: 64,
        };
        tasks.push(if ls_task == Some(i) {
            TaskSpec::latency_sensitive(trace)
        } else {
            TaskSpec {
                iterations: rng.random_range(1..=2),
                ..TaskSpec::best_effort(trace)
            }
        });
    }
    let mechanism = if rng.random_bool(0.5) {
        MechanismConfig::PriorityStreams {
            priorities: (0..n_tasks).map(|_| rng.random_range(-2..=0)).collect(),
        }
    } else {
        let total = gpu.num_sms * gpu.threads_per_sm;
        MechanismConfig::Mps {
            thread_limit_pct: tasks
                .iter()
                .map(|t: &TaskSpec| {
                    let widest = t.trace.invocations.iter().map(|i| i.kernel.threads_per_block).max().unwrap();
                    // smallest whole percent whose cap still admits one block
                    let floor = (1..=100).find(|p| p * total / 100 >= widest).unwrap();
                    rng.random_range(floor..=100) as f64
                })
                .collect(),
            min_reservation: vec![None; n_tasks],
            strict_head_of_line: false,
        }
    };
    let mut s = Scenario::new(gpu, mechanism, tasks, ArrivalPattern::single_stream(rng.random_range(1..=3)));
    s.gap_default_us = rng.random_range(0..=5) as f64;
    s.leftover_order = if rng.random_bool(0.8) { LeftoverOrder::Fifo } else { LeftoverOrder::Lifo };
    s
}
