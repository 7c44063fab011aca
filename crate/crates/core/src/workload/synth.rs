//! Synthetic kernel-sequence traces matching aggregate classification
//! statistics (share of large kernels, share of runtime in long-running
//! kernels).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::{KernelInvocation, TaskKind, TaskTrace};
use crate::error::SynthesisError;
use crate::resource::{gpu_capacity, GpuConfig, KernelDescriptor, LONG_RUNNING_THRESHOLD_US};

const SHORT_CEILING_US: f64 = 950.0;
const SHORT_FLOOR_US: f64 = 1.0;
const LONG_FLOOR_US: f64 = 1050.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisSpec {
    pub task_id: String,
    pub kind: TaskKind,
    pub num_kernels: usize,
    /// Fraction of kernels whose grid exceeds the GPU's resident capacity.
    pub frac_large: f64,
    /// Fraction of total isolated runtime spent in long-running kernels.
    pub frac_long_running_time: f64,
    pub threads_per_block: Vec<u32>,
    pub regs_per_thread: Vec<u32>,
    pub shared_mem_per_block_kb: Vec<u32>,
    pub max_grid_blocks: u32,
    pub short_median_us: f64,
    pub long_median_us: f64,
    /// Log-space standard deviation of kernel durations.
    pub duration_sigma: f64,
    pub gap_after_us: Option<f64>,
    pub global_mem_alloc_mb: u64,
    pub seed: u64,
}

impl Default for SynthesisSpec {
    fn default() -> Self {
        SynthesisSpec {
            task_id: "synthetic".into(),
            kind: TaskKind::Training,
            num_kernels: 200,
            frac_large: 0.0,
            frac_long_running_time: 0.0,
            threads_per_block: vec![64, 128, 256, 512],
            regs_per_thread: vec![32, 48, 64],
            shared_mem_per_block_kb: vec![0, 8, 16],
            max_grid_blocks: 4096,
            short_median_us: 80.0,
            long_median_us: 2500.0,
            duration_sigma: 0.6,
            gap_after_us: None,
            global_mem_alloc_mb: 1024,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy)]
struct Shape {
    threads: u32,
    regs: u32,
    smem: u32,
    capacity: u64,
}

pub fn synthesize_trace(spec: &SynthesisSpec, gpu: &GpuConfig) -> Result<TaskTrace, SynthesisError> {
    let n = spec.num_kernels;
    if n == 0 {
        return Err(SynthesisError("num_kernels must be at least 1".into()));
    }
    for (name, f) in [
        ("frac_large", spec.frac_large),
        ("frac_long_running_time", spec.frac_long_running_time),
    ] {
        if !(0.0..=1.0).contains(&f) {
            return Err(SynthesisError(format!("{name} = {f} outside [0, 1]")));
        }
    }
    if !(spec.short_median_us > 0.0 && spec.long_median_us > 0.0 && spec.duration_sigma >= 0.0) {
        return Err(SynthesisError("duration distribution parameters must be positive".into()));
    }

    let shapes = valid_shapes(spec, gpu);
    if shapes.is_empty() {
        return Err(SynthesisError("no block shape fits on one SM".into()));
    }
    let large_shapes: Vec<Shape> = shapes
        .iter()
        .copied()
        .filter(|s| s.capacity < u64::from(spec.max_grid_blocks))
        .collect();
    let n_large = (spec.frac_large * n as f64).round() as usize;
    if n_large > 0 && large_shapes.is_empty() {
        return Err(SynthesisError(format!(
            "max_grid_blocks {} cannot exceed the resident capacity of any shape",
            spec.max_grid_blocks
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut is_large = vec![false; n];
    is_large[..n_large].iter_mut().for_each(|x| *x = true);
    is_large.shuffle(&mut rng);

    let durations = durations(spec, n, &mut rng)?;

    let invocations = (0..n)
        .map(|i| {
            let (shape, grid) = if is_large[i] {
                let s = large_shapes[rng.random_range(0..large_shapes.len())];
                let lo = s.capacity + 1;
                let grid = rng.random_range(lo..=u64::from(spec.max_grid_blocks));
                (s, grid)
            } else {
                let s = shapes[rng.random_range(0..shapes.len())];
                let hi = s.capacity.min(u64::from(spec.max_grid_blocks)).max(1);
                (s, rng.random_range(1..=hi))
            };
            let kernel = KernelDescriptor::new(
                format!("{}_k{i}", spec.task_id),
                grid as u32,
                shape.threads,
                shape.regs,
                shape.smem,
                durations[i],
            );
            KernelInvocation {
                kernel,
                gap_after_us: spec.gap_after_us,
                transfers: Vec::new(),
            }
        })
        .collect();

    Ok(TaskTrace {
        task_id: spec.task_id.clone(),
        kind: spec.kind,
        invocations,
        global_mem_alloc_mb: spec.global_mem_alloc_mb,
    })
}

fn valid_shapes(spec: &SynthesisSpec, gpu: &GpuConfig) -> Vec<Shape> {
    let mut out = Vec::new();
    for &threads in &spec.threads_per_block {
        for &regs in &spec.regs_per_thread {
            for &smem in &spec.shared_mem_per_block_kb {
                let k = KernelDescriptor::new("probe", 1, threads, regs, smem, 1.0);
                if k.validate(gpu).is_ok() {
                    out.push(Shape {
                        threads,
                        regs,
                        smem,
                        capacity: gpu_capacity(&k, gpu),
                    });
                }
            }
        }
    }
    out
}

fn round_ns(us: f64) -> f64 {
    (us * 1000.0).round() / 1000.0
}

/// Durations whose long-running share of total runtime equals the target.
fn durations(spec: &SynthesisSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, SynthesisError> {
    let f = spec.frac_long_running_time;
    let short = LogNormal::new(spec.short_median_us.ln(), spec.duration_sigma)
        .map_err(|e| SynthesisError(e.to_string()))?;
    let long = LogNormal::new(spec.long_median_us.ln(), spec.duration_sigma)
        .map_err(|e| SynthesisError(e.to_string()))?;
    let sample_short = |rng: &mut ChaCha8Rng| round_ns(short.sample(rng).clamp(SHORT_FLOOR_US, SHORT_CEILING_US));
    let sample_long = |rng: &mut ChaCha8Rng| long.sample(rng).max(LONG_FLOOR_US);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);

    if f == 0.0 {
        return Ok((0..n).map(|_| sample_short(rng)).collect());
    }
    if f == 1.0 {
        return Ok((0..n).map(|_| round_ns(sample_long(rng))).collect());
    }
    if n < 2 {
        return Err(SynthesisError(
            "a fractional long-running share needs at least two kernels".into(),
        ));
    }

    // Expected count that reproduces f with the two medians.
    let (s, l) = (spec.short_median_us, spec.long_median_us);
    let guess = (f * n as f64 * s / (l * (1.0 - f) + f * s)).round() as usize;
    let mut n_long = guess.clamp(1, n - 1);

    let mut base: Vec<f64> = (0..n).map(|_| sample_short(rng)).collect();
    let weights: Vec<f64> = (0..n).map(|_| sample_long(rng)).collect();
    loop {
        let long_idx = &order[..n_long];
        let short_sum: f64 = order[n_long..].iter().map(|&i| base[i]).sum();
        let target_long = f / (1.0 - f) * short_sum;
        let weight_sum: f64 = long_idx.iter().map(|&i| weights[i]).sum();
        let scale = target_long / weight_sum;
        let min_long = long_idx.iter().map(|&i| weights[i] * scale).fold(f64::INFINITY, f64::min);
        if min_long > LONG_RUNNING_THRESHOLD_US + 1.0 {
            let mut out = base.clone();
            for &i in long_idx {
                out[i] = round_ns(weights[i] * scale);
            }
            return Ok(out);
        }
        if n_long > 1 {
            n_long -= 1;
            continue;
        }
        // One long kernel is still too short: stretch the short ones.
        let needed = (LONG_RUNNING_THRESHOLD_US + 50.0) / target_long;
        let max_short = order[1..].iter().map(|&i| base[i]).fold(0.0, f64::max);
        if max_short * needed > LONG_RUNNING_THRESHOLD_US {
            return Err(SynthesisError(format!(
                "cannot reach long-running share {f} with {n} kernels"
            )));
        }
        for &i in &order[1..] {
            base[i] = round_ns(base[i] * needed);
        }
    }
}
