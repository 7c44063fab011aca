//! Tasks as kernel sequences, request arrival generation and trace files.

mod synth;
mod trace_io;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::ValidationError;
use crate::resource::{classify_kernel, GpuConfig, KernelDescriptor};
use crate::time::SimTime;

pub use synth::{synthesize_trace, SynthesisSpec};
pub use trace_io::{emit_trace, load_trace, parse_trace, trace_to_string};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferDirection {
    HostToDevice,
    DeviceToHost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferPosition {
    BeforeKernel,
    AfterKernel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferOp {
    pub direction: TransferDirection,
    pub size_kb: f64,
    pub position: TransferPosition,
}

/// Time a transfer of `size_kb` occupies a host link of `bandwidth_gbps`.
pub fn transfer_duration(size_kb: f64, bandwidth_gbps: f64) -> SimTime {
    // KB / (GB/s) = 1e3 / 1e9 s = 1 µs per (KB per GB/s)
    SimTime::from_us(size_kb / bandwidth_gbps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelInvocation {
    pub kernel: KernelDescriptor,
    /// Delay between this kernel's completion and the next kernel reaching
    /// the device. `None` defers to the scenario's default gap.
    pub gap_after_us: Option<f64>,
    pub transfers: Vec<TransferOp>,
}

impl KernelInvocation {
    pub fn new(kernel: KernelDescriptor) -> Self {
        KernelInvocation {
            kernel,
            gap_after_us: None,
            transfers: Vec::new(),
        }
    }

    pub fn with_gap(mut self, gap_us: f64) -> Self {
        self.gap_after_us = Some(gap_us);
        self
    }

    pub fn with_transfer(mut self, t: TransferOp) -> Self {
        self.transfers.push(t);
        self
    }

    pub fn transfers_at(&self, pos: TransferPosition) -> impl Iterator<Item = &TransferOp> {
        self.transfers.iter().filter(move |t| t.position == pos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Training,
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskTrace {
    pub task_id: String,
    pub kind: TaskKind,
    pub invocations: Vec<KernelInvocation>,
    pub global_mem_alloc_mb: u64,
}

impl TaskTrace {
    pub fn validate(&self, gpu: &GpuConfig) -> Result<(), ValidationError> {
        if self.invocations.is_empty() {
            return Err(ValidationError::new(format!("trace '{}' has no invocations", self.task_id)));
        }
        if self.global_mem_alloc_mb > gpu.global_mem_mb {
            return Err(ValidationError::new(format!(
                "trace '{}' allocates {} MB, device has {} MB",
                self.task_id, self.global_mem_alloc_mb, gpu.global_mem_mb
            )));
        }
        for inv in &self.invocations {
            inv.kernel.validate(gpu)?;
            if let Some(gap) = inv.gap_after_us {
                if !(gap.is_finite() && gap >= 0.0) {
                    return Err(ValidationError::new(format!(
                        "kernel '{}': gap_after_us must be non-negative",
                        inv.kernel.name
                    )));
                }
            }
            for t in &inv.transfers {
                if !(t.size_kb.is_finite() && t.size_kb > 0.0) {
                    return Err(ValidationError::new(format!(
                        "kernel '{}': transfer size must be positive",
                        inv.kernel.name
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArrivalMode {
    /// Open-loop arrivals with exponential inter-arrival gaps.
    Poisson,
    /// Closed loop: each request arrives when the previous one completes.
    SingleStream,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrivalPattern {
    pub mode: ArrivalMode,
    #[serde(default)]
    pub rate_per_s: Option<f64>,
    pub num_requests: u32,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl ArrivalPattern {
    pub fn single_stream(num_requests: u32) -> Self {
        ArrivalPattern {
            mode: ArrivalMode::SingleStream,
            rate_per_s: None,
            num_requests,
            seed: None,
        }
    }

    pub fn poisson(rate_per_s: f64, num_requests: u32, seed: u64) -> Self {
        ArrivalPattern {
            mode: ArrivalMode::Poisson,
            rate_per_s: Some(rate_per_s),
            num_requests,
            seed: Some(seed),
        }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.num_requests == 0 {
            return Err(ValidationError::new("arrivals.num_requests must be at least 1"));
        }
        if self.mode == ArrivalMode::Poisson {
            match self.rate_per_s {
                Some(r) if r.is_finite() && r > 0.0 => {}
                _ => return Err(ValidationError::new("poisson arrivals need a positive rate_per_s")),
            }
        }
        Ok(())
    }
}

/// When a request reaches the inference task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrivalTime {
    At(SimTime),
    /// Resolved by the engine: the completion time of the previous request
    /// (time zero for the first).
    AfterPrevious,
}

/// Request arrival schedule. `fallback_seed` is used when the pattern
/// carries no seed of its own.
pub fn generate_arrivals(p: &ArrivalPattern, fallback_seed: u64) -> Vec<ArrivalTime> {
    match p.mode {
        ArrivalMode::SingleStream => {
            let mut v = vec![ArrivalTime::AfterPrevious; p.num_requests as usize];
            if let Some(first) = v.first_mut() {
                *first = ArrivalTime::At(SimTime::ZERO);
            }
            v
        }
        ArrivalMode::Poisson => {
            let rate = p.rate_per_s.expect("validated poisson rate");
            let mean_gap_us = 1e6 / rate;
            let exp = Exp::new(1.0 / mean_gap_us).expect("positive rate");
            let mut rng = ChaCha8Rng::seed_from_u64(p.seed.unwrap_or(fallback_seed));
            let mut t = 0.0;
            (0..p.num_requests)
                .map(|_| {
                    t += exp.sample(&mut rng);
                    ArrivalTime::At(SimTime::from_us(t))
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub total_kernels: usize,
    pub pct_large_kernels: f64,
    pub pct_long_running_runtime: f64,
}

pub fn trace_stats(t: &TaskTrace, g: &GpuConfig) -> TraceStats {
    let total = t.invocations.len();
    let mut large = 0usize;
    let mut long_time = 0.0;
    let mut all_time = 0.0;
    for inv in &t.invocations {
        let class = classify_kernel(&inv.kernel, g);
        if class.large {
            large += 1;
        }
        all_time += inv.kernel.isolated_duration_us;
        if class.long_running {
            long_time += inv.kernel.isolated_duration_us;
        }
    }
    TraceStats {
        total_kernels: total,
        pct_large_kernels: if total == 0 { 0.0 } else { 100.0 * large as f64 / total as f64 },
        pct_long_running_runtime: if all_time > 0.0 { 100.0 * long_time / all_time } else { 0.0 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inv(grid: u32, threads: u32, dur: f64) -> KernelInvocation {
        KernelInvocation::new(KernelDescriptor::new("k", grid, threads, 32, 0, dur))
    }

    fn trace(invs: Vec<KernelInvocation>) -> TaskTrace {
        TaskTrace {
            task_id: "t".into(),
            kind: TaskKind::Training,
            invocations: invs,
            global_mem_alloc_mb: 100,
        }
    }

    #[test]
    fn single_stream_placeholders() {
        let a = generate_arrivals(&ArrivalPattern::single_stream(3), 0);
        assert_eq!(
            a,
            vec![ArrivalTime::At(SimTime::ZERO), ArrivalTime::AfterPrevious, ArrivalTime::AfterPrevious]
        );
    }

    #[test]
    fn poisson_single_sample_non_negative() {
        let a = generate_arrivals(&ArrivalPattern::poisson(100.0, 1, 9), 0);
        assert_eq!(a.len(), 1);
        assert!(matches!(a[0], ArrivalTime::At(_)));
    }

    #[test]
    fn poisson_mean_gap_close_to_inverse_rate() {
        let rate = 250.0;
        let a = generate_arrivals(&ArrivalPattern::poisson(rate, 10_000, 42), 0);
        let times: Vec<f64> = a
            .iter()
            .map(|x| match x {
                ArrivalTime::At(t) => t.as_us(),
                ArrivalTime::AfterPrevious => unreachable!(),
            })
            .collect();
        assert!(times.windows(2).all(|w| w[0] <= w[1]));
        let mean_gap = times.last().unwrap() / times.len() as f64;
        let expected = 1e6 / rate;
        assert!((mean_gap - expected).abs() / expected < 0.05, "{mean_gap} vs {expected}");
    }

    #[test]
    fn poisson_is_seed_deterministic() {
        let p = ArrivalPattern::poisson(100.0, 50, 3);
        assert_eq!(generate_arrivals(&p, 0), generate_arrivals(&p, 99));
        let q = ArrivalPattern::poisson(100.0, 50, 4);
        assert_ne!(generate_arrivals(&p, 0), generate_arrivals(&q, 0));
    }

    #[test]
    fn stats_examples() {
        let g = GpuConfig::default();
        let s = trace_stats(&trace(vec![inv(200704, 256, 5000.0)]), &g);
        assert_eq!(s.total_kernels, 1);
        assert_eq!(s.pct_large_kernels, 100.0);
        assert_eq!(s.pct_long_running_runtime, 100.0);

        let s = trace_stats(&trace(vec![inv(10, 64, 1500.0), inv(10, 64, 500.0)]), &g);
        assert_eq!(s.pct_large_kernels, 0.0);
        assert_eq!(s.pct_long_running_runtime, 75.0);

        let s = trace_stats(&trace(vec![inv(10, 64, 999.0)]), &g);
        assert_eq!(s.pct_long_running_runtime, 0.0);
    }

    #[test]
    fn empty_trace_is_invalid() {
        assert!(trace(vec![]).validate(&GpuConfig::default()).is_err());
    }

    #[test]
    fn transfer_duration_arithmetic() {
        assert_eq!(transfer_duration(1000.0, 16.0), SimTime::from_us(62.5));
    }
}
