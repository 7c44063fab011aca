#![allow(dead_code)]


pub mod oracle;

use std::path::PathBuf;

use blocksim::engine::{EventKind, EventLog};
use blocksim::time::SimTime;

pub const GOLDEN: &[&str] = &[
    "compounded-delay",
    "region-a",
    "region-b",
    "register-oom",
    "mps-headline-block",
    "timeslice-serialization",
];

pub fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios/golden")
        .join(format!("{name}.toml"))
}

/// First instant at which blocks of two different tasks execute together,
/// if any. Restoring blocks count as executing.
pub fn first_cross_task_overlap(log: &EventLog) -> Option<SimTime> {
    use std::collections::HashMap;
    let mut task_of_kernel = HashMap::new();
    let mut live: HashMap<u32, usize> = HashMap::new();
    let mut per_task: HashMap<usize, usize> = HashMap::new();
    for e in &log.events {
        match &e.kind {
            EventKind::KernelArrival { key, kernel, .. } => {
                task_of_kernel.insert(*kernel, key.task);
            }
            EventKind::BlockDispatch { kernel, block, .. } => {
                let t = task_of_kernel[kernel];
                live.insert(*block, t);
                *per_task.entry(t).or_default() += 1;
            }
            EventKind::BlockComplete { block, .. } | EventKind::BlockCheckpoint { block, .. } => {
                if let Some(t) = live.remove(block) {
                    *per_task.get_mut(&t).unwrap() -= 1;
                }
            }
            _ => {}
        }
        if per_task.values().filter(|&&n| n > 0).count() > 1 {
            return Some(e.time);
        }
    }
    None
}

use blocksim::engine::{Scenario, TaskSpec};
use blocksim::mechanisms::{MechanismConfig, MechanismKind};
use blocksim::preemption::{PreemptionCostModel, PreemptionPolicy};
use blocksim::resource::{GpuConfig, KernelDescriptor, ResourceVector};
use blocksim::workload::{
    ArrivalPattern, KernelInvocation, TaskKind, TaskTrace, TransferDirection, TransferOp, TransferPosition,
};
use rand::Rng;

/// `lean` keeps blocks small so that several processes' footprints can stay
/// resident together under time-slicing.
fn random_trace(rng: &mut impl Rng, id: &str, kind: TaskKind, max_grid: u32, lean: bool) -> TaskTrace {
    let n = rng.random_range(1..=4);
    let shapes = if lean { 3 } else { 5 };
    let invocations = (0..n)
        .map(|j| {
            let k = KernelDescriptor::new(
                format!("{id}_k{j}"),
                rng.random_range(1..=max_grid),
                [64, 128, 256, 512, 1024][rng.random_range(0..shapes)],
                [16, 24, 32, 48][rng.random_range(0..shapes - 1)],
                [0, 0, 16, 48][rng.random_range(0..shapes - 1)],
                rng.random_range(5.0..3000.0_f64).round(),
            );
            let mut inv = KernelInvocation::new(k);
            if rng.random_bool(0.5) {
                inv = inv.with_gap(rng.random_range(0.0..60.0_f64).round());
            }
            for (direction, position) in [
                (TransferDirection::HostToDevice, TransferPosition::BeforeKernel),
                (TransferDirection::DeviceToHost, TransferPosition::AfterKernel),
            ] {
                if rng.random_bool(0.25) {
                    inv = inv.with_transfer(TransferOp {
                        direction,
                        size_kb: rng.random_range(10.0..2000.0_f64).round(),
                        position,
                    });
                }
            }
            inv
        })
        .collect();
    TaskTrace {
        task_id: id.into(),
        kind,
        invocations,
        global_mem_alloc_mb: 128,
    }
}

/// A random co-location scenario: one latency-sensitive task plus one or two
/// best-effort tasks on a small GPU, under `kind` (or a random mechanism).
pub fn random_scenario(rng: &mut impl Rng, kind: Option<MechanismKind>) -> Scenario {
    let gpu = GpuConfig {
        num_sms: rng.random_range(1..=6),
        ..GpuConfig::default()
    };
    let kind = kind.unwrap_or([MechanismKind::Streams, MechanismKind::Timeslicing, MechanismKind::Mps][rng.random_range(0..3)]);
    let lean = kind == MechanismKind::Timeslicing;
    let mut tasks = vec![TaskSpec::latency_sensitive(random_trace(rng, "infer", TaskKind::Inference, 24, lean))];
    for i in 0..rng.random_range(1..=2) {
        let mut t = TaskSpec::best_effort(random_trace(rng, &format!("train{i}"), TaskKind::Training, 80, lean));
        t.iterations = rng.random_range(1..=2);
        tasks.push(t);
    }
    let n = tasks.len();
    let mechanism = match kind {
        MechanismKind::Streams => MechanismConfig::PriorityStreams {
            priorities: (0..n).map(|_| rng.random_range(-2..=0)).collect(),
        },
        MechanismKind::Timeslicing => MechanismConfig::TimeSlicing {
            slice_length_us: rng.random_range(200.0..3000.0_f64).round(),
            ctx_save_cost_us: rng.random_range(0.0..100.0_f64).round(),
            ctx_restore_cost_us: rng.random_range(0.0..100.0_f64).round(),
        },
        MechanismKind::Mps => MechanismConfig::Mps {
            thread_limit_pct: tasks
                .iter()
                .map(|t| {
                    let widest = t.trace.invocations.iter().map(|i| i.kernel.threads_per_block).max().unwrap();
                    let total = f64::from(gpu.num_sms * gpu.threads_per_sm);
                    let pct: f64 = [50.0, 75.0, 100.0][rng.random_range(0..3)];
                    if (pct / 100.0 * total).floor() < f64::from(widest) { 100.0 } else { pct }
                })
                .collect(),
            min_reservation: (0..n)
                .map(|i| {
                    (i == 0 && rng.random_bool(0.3)).then(|| ResourceVector {
                        threads: 1024 * gpu.num_sms,
                        ..ResourceVector::ZERO
                    })
                })
                .collect(),
            strict_head_of_line: false,
        },
    };
    let requests = rng.random_range(1..=5);
    let arrivals = if rng.random_bool(0.5) {
        ArrivalPattern::single_stream(requests)
    } else {
        ArrivalPattern::poisson(rng.random_range(100.0..3000.0), requests, rng.random())
    };
    let mut s = Scenario::new(gpu, mechanism, tasks, arrivals);
    s.seed = rng.random();
    s.contention_alpha = [0.0, 0.0, 0.25, 1.0][rng.random_range(0..4)];
    s.gap_default_us = rng.random_range(0.0..40.0_f64).round();
    if kind != MechanismKind::Timeslicing && rng.random_bool(0.5) {
        s.preemption.enabled = true;
        s.preemption.policy = PreemptionPolicy::ALL[rng.random_range(0..PreemptionPolicy::ALL.len())];
        if rng.random_bool(0.5) {
            s.preemption.cost_model = PreemptionCostModel::with_fixed_cost(rng.random_range(1.0..150.0_f64).round());
        }
    }
    s
}
