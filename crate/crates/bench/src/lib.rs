//! Shared fixtures for the scheduling benchmarks.

use blocksim::engine::{Scenario, TaskSpec};
use blocksim::mechanisms::MechanismConfig;
use blocksim::preemption::VictimCandidate;
use blocksim::resource::{GpuConfig, ResourceVector};
use blocksim::scheduler::{empty_sms, DispatchQueue, LeftoverOrder, QueuedKernel, SmState};
use blocksim::workload::{synthesize_trace, ArrivalPattern, SynthesisSpec, TaskKind};

/// Every SM of `gpu` filled with six 256-thread, 32-register training
/// blocks, each a preemption candidate.
pub fn saturated_device(gpu: &GpuConfig) -> (Vec<SmState>, Vec<VictimCandidate>) {
    let demand = ResourceVector::new(256, 1, 256 * 32, 0);
    let mut sms = empty_sms(gpu.num_sms, gpu.sm_limits());
    let mut candidates = Vec::new();
    let mut id = 0;
    for sm in &mut sms {
        for j in 0..6 {
            sm.allocate(demand);
            sm.resident.push(id);
            candidates.push(VictimCandidate {
                block: id,
                sm_id: sm.sm_id,
                task: 1,
                demand,
                remaining_work: 1.0e6 + f64::from((id * 7919) % 1000) + f64::from(j),
            });
            id += 1;
        }
    }
    (sms, candidates)
}

/// A queue of `kernels` arrived kernels of mixed shapes.
pub fn mixed_queue(kernels: u32) -> DispatchQueue {
    let shapes = [
        ResourceVector::new(256, 1, 256 * 32, 0),
        ResourceVector::new(128, 1, 128 * 64, 16),
        ResourceVector::new(64, 1, 64 * 80, 0),
        ResourceVector::new(512, 1, 512 * 32, 48),
    ];
    let mut q = DispatchQueue::new(LeftoverOrder::Fifo);
    for k in 0..kernels {
        q.push(QueuedKernel {
            kernel: k,
            task: (k % 2) as usize,
            arrival_seq: u64::from(k),
            demand: shapes[k as usize % shapes.len()],
            undispatched: 200 + 37 * k,
        });
    }
    q
}

/// An inference task against a training task on a 20-SM device under
/// priority streams. Block shapes are lean enough for both processes to
/// stay resident under time-slicing.
pub fn colocated_scenario() -> Scenario {
    let gpu = GpuConfig {
        num_sms: 20,
        ..GpuConfig::default()
    };
    let train = synthesize_trace(
        &SynthesisSpec {
            task_id: "train".into(),
            kind: TaskKind::Training,
            num_kernels: 30,
            frac_large: 0.5,
            frac_long_running_time: 0.5,
            max_grid_blocks: 320,
            threads_per_block: vec![256],
            regs_per_thread: vec![32],
            shared_mem_per_block_kb: vec![0],
            seed: 1,
            ..SynthesisSpec::default()
        },
        &gpu,
    )
    .expect("training trace");
    let infer = synthesize_trace(
        &SynthesisSpec {
            task_id: "infer".into(),
            kind: TaskKind::Inference,
            num_kernels: 8,
            max_grid_blocks: 40,
            short_median_us: 60.0,
            threads_per_block: vec![64, 128],
            regs_per_thread: vec![32],
            shared_mem_per_block_kb: vec![0],
            seed: 2,
            ..SynthesisSpec::default()
        },
        &gpu,
    )
    .expect("inference trace");
    Scenario::new(
        gpu,
        MechanismConfig::PriorityStreams { priorities: vec![-2, 0] },
        vec![TaskSpec::latency_sensitive(infer), TaskSpec::best_effort(train)],
        ArrivalPattern::single_stream(10),
    )
}
