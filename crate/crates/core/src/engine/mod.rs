//! Discrete-event simulation core: the clock, the event queue, task
//! lifecycles and the interplay of mechanisms, scheduler, transfers and
//! preemption.

mod log;
mod replay;
mod sim;

pub use log::{EventKind, EventLog, KernelKey, LogHeader, LogReadError, LogTask, SimEvent};
pub use replay::{audit, replay, ReplayState};

use serde::{Deserialize, Serialize};

use crate::error::{SimError, ValidationError};
use crate::mechanisms::{MechanismConfig, MechanismKind};
use crate::metrics::{summarize, SimReport};
use crate::preemption::PreemptionConfig;
use crate::resource::GpuConfig;
use crate::scheduler::LeftoverOrder;
use crate::workload::{ArrivalPattern, TaskTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    LatencySensitive,
    BestEffort,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub trace: TaskTrace,
    pub role: Role,
    /// Passes over the trace for a best-effort task. Latency-sensitive
    /// tasks run once per request instead.
    pub iterations: u32,
}

impl TaskSpec {
    pub fn latency_sensitive(trace: TaskTrace) -> Self {
        TaskSpec {
            trace,
            role: Role::LatencySensitive,
            iterations: 1,
        }
    }

    pub fn best_effort(trace: TaskTrace) -> Self {
        TaskSpec {
            trace,
            role: Role::BestEffort,
            iterations: 1,
        }
    }
}

pub const DEFAULT_GAP_US: f64 = 20.0;
pub const DEFAULT_HOST_BANDWIDTH_GBPS: f64 = 16.0;
pub const DEFAULT_STARVATION_HORIZON_US: f64 = 1.0e8;

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub gpu: GpuConfig,
    pub mechanism: MechanismConfig,
    pub tasks: Vec<TaskSpec>,
    /// Governs the latency-sensitive task's requests.
    pub arrivals: ArrivalPattern,
    /// Slowdown factor for blocks sharing an SM with other tasks' warps.
    pub contention_alpha: f64,
    /// Launch gap after kernels whose trace entry does not set one.
    pub gap_default_us: f64,
    pub host_bandwidth_gbps: f64,
    pub seed: u64,
    pub preemption: PreemptionConfig,
    pub leftover_order: LeftoverOrder,
    /// Simulated time without any progress after which a run is aborted.
    pub starvation_horizon_us: f64,
}

impl Scenario {
    pub fn new(gpu: GpuConfig, mechanism: MechanismConfig, tasks: Vec<TaskSpec>, arrivals: ArrivalPattern) -> Self {
        Scenario {
            gpu,
            mechanism,
            tasks,
            arrivals,
            contention_alpha: 0.0,
            gap_default_us: DEFAULT_GAP_US,
            host_bandwidth_gbps: DEFAULT_HOST_BANDWIDTH_GBPS,
            seed: 0,
            preemption: PreemptionConfig::default(),
            leftover_order: LeftoverOrder::Fifo,
            starvation_horizon_us: DEFAULT_STARVATION_HORIZON_US,
        }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        self.gpu.validate()?;
        if self.tasks.is_empty() {
            return Err(ValidationError::new("scenario has no tasks"));
        }
        let ls = self.tasks.iter().filter(|t| t.role == Role::LatencySensitive).count();
        if ls > 1 {
            return Err(ValidationError::new("at most one latency-sensitive task is supported"));
        }
        for t in &self.tasks {
            t.trace.validate(&self.gpu)?;
            if t.iterations == 0 {
                return Err(ValidationError::new(format!("task '{}': iterations must be at least 1", t.trace.task_id)));
            }
        }
        if ls == 1 {
            self.arrivals.validate()?;
        }
        self.mechanism.validate(self.tasks.len())?;
        if !(self.contention_alpha.is_finite() && self.contention_alpha >= 0.0) {
            return Err(ValidationError::new("contention_alpha must be non-negative"));
        }
        if !(self.gap_default_us.is_finite() && self.gap_default_us >= 0.0) {
            return Err(ValidationError::new("gap_default_us must be non-negative"));
        }
        if !(self.host_bandwidth_gbps.is_finite() && self.host_bandwidth_gbps > 0.0) {
            return Err(ValidationError::new("host_bandwidth_gbps must be positive"));
        }
        if !(self.starvation_horizon_us.is_finite() && self.starvation_horizon_us > 0.0) {
            return Err(ValidationError::new("starvation_horizon_us must be positive"));
        }
        if self.preemption.enabled {
            self.preemption.cost_model.validate()?;
            if self.mechanism.kind() == MechanismKind::Timeslicing {
                return Err(ValidationError::new(
                    "fine-grained preemption cannot be combined with time-slicing",
                ));
            }
            if let Some(tau) = self.preemption.leave_space_threshold_us {
                if !(tau.is_finite() && tau >= 0.0) {
                    return Err(ValidationError::new("leave_space_threshold_us must be non-negative"));
                }
            }
        }
        Ok(())
    }

    pub fn latency_sensitive_task(&self) -> Option<usize> {
        self.tasks.iter().position(|t| t.role == Role::LatencySensitive)
    }

    /// The same scenario with only task `task`, under a mechanism that adds
    /// no constraints of its own.
    pub fn isolated(&self, task: usize) -> Scenario {
        Scenario {
            mechanism: MechanismConfig::PriorityStreams { priorities: vec![0] },
            tasks: vec![self.tasks[task].clone()],
            preemption: PreemptionConfig::default(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: SimReport,
    pub log: EventLog,
}

/// Runs a scenario to completion and summarizes it (without baseline
/// ratios).
pub fn run(s: &Scenario) -> Result<RunOutput, SimError> {
    let log = simulate(s)?;
    let report = summarize(&log, None)?;
    Ok(RunOutput { report, log })
}

/// Runs a scenario and returns only its event log.
pub fn simulate(s: &Scenario) -> Result<EventLog, SimError> {
    s.validate()?;
    sim::Simulator::new(s)?.run()
}

/// Runs `task` alone on the scenario's GPU.
pub fn run_baseline(task: &TaskSpec, s: &Scenario) -> Result<SimReport, SimError> {
    let mut alone = s.clone();
    alone.tasks = vec![task.clone()];
    Ok(run(&alone.isolated(0))?.report)
}

/// Isolated references for degradation ratios: latency-sensitive turnaround
/// from that task alone, best-effort makespan from the best-effort tasks
/// each alone.
pub fn baseline_report(s: &Scenario) -> Result<SimReport, SimError> {
    let mut merged: Option<SimReport> = None;
    for t in &s.tasks {
        let r = run_baseline(t, s)?;
        merged = Some(match merged {
            None => r,
            Some(m) => m.merge_isolated(r),
        });
    }
    merged.ok_or_else(|| SimError::Invalid(ValidationError::new("scenario has no tasks")))
}

/// Run plus degradation ratios against isolated baselines.
pub fn run_with_baseline(s: &Scenario) -> Result<RunOutput, SimError> {
    let log = simulate(s)?;
    let baseline = baseline_report(s)?;
    let report = summarize(&log, Some(&baseline))?;
    Ok(RunOutput { report, log })
}
