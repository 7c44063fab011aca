//! Performance metrics over a finished run: request turnaround statistics,
//! best-effort execution time as the utilization proxy, per-kernel dispatch
//! delay, and occupancy over time.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::engine::{EventKind, EventLog, KernelKey, Role};
use crate::error::MetricsError;
use crate::resource::{GpuConfig, ResourceVector};
use crate::scheduler::{BlockId, KernelId, SmState};
use crate::time::SimTime;

pub fn turnaround(arrival_us: f64, completion_us: f64) -> Result<f64, MetricsError> {
    if completion_us < arrival_us {
        return Err(MetricsError::NegativeDuration {
            arrival_us,
            completion_us,
        });
    }
    Ok(completion_us - arrival_us)
}

/// Fraction of each SM resource in use across the device.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Occupancy {
    pub threads: f64,
    pub blocks: f64,
    pub registers: f64,
    pub shared_mem: f64,
}

impl Occupancy {
    fn from_totals(used: [u64; 4], limits: [u64; 4]) -> Self {
        let f = |i: usize| if limits[i] == 0 { 0.0 } else { used[i] as f64 / limits[i] as f64 };
        Occupancy {
            threads: f(0),
            blocks: f(1),
            registers: f(2),
            shared_mem: f(3),
        }
    }

    pub fn as_pairs(&self) -> [(&'static str, f64); 4] {
        [
            ("threads", self.threads),
            ("blocks", self.blocks),
            ("registers", self.registers),
            ("shared_mem", self.shared_mem),
        ]
    }
}

fn totals(v: &ResourceVector) -> [u64; 4] {
    [
        u64::from(v.threads),
        u64::from(v.blocks),
        u64::from(v.registers),
        u64::from(v.shared_mem_kb),
    ]
}

pub fn occupancy_snapshot(sms: &[SmState], g: &GpuConfig) -> Occupancy {
    let mut used = [0u64; 4];
    for sm in sms {
        for (u, x) in used.iter_mut().zip(totals(&sm.used())) {
            *u += x;
        }
    }
    let per_sm = totals(&g.sm_limits());
    let n = u64::from(g.num_sms);
    Occupancy::from_totals(used, per_sm.map(|x| x * n))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequestRecord {
    pub request: u32,
    pub arrival_us: f64,
    /// First block dispatch of the request.
    pub start_us: f64,
    pub completion_us: f64,
    pub turnaround_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelRecord {
    pub key: KernelKey,
    pub kernel: KernelId,
    pub arrival_us: f64,
    pub first_dispatch_us: f64,
    pub completion_us: f64,
    /// Time from arrival until the first block was dispatched.
    pub added_wait_us: f64,
    /// Save latency of preemptions performed on this kernel's behalf.
    pub preemption_cost_us: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OccupancyPoint {
    pub time_us: f64,
    pub occupancy: Occupancy,
}

/// Concurrent over isolated ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Degradation {
    pub turnaround_mean: Option<f64>,
    pub best_effort_makespan: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub requests: Vec<RequestRecord>,
    pub per_request_turnaround_us: Vec<f64>,
    pub turnaround_mean_us: f64,
    /// Population variance.
    pub turnaround_variance_us2: f64,
    /// Nearest-rank 99th percentile.
    pub turnaround_p99_us: f64,
    pub best_effort_makespan_us: Option<f64>,
    pub makespan_us: f64,
    pub kernels: Vec<KernelRecord>,
    pub occupancy_series: Vec<OccupancyPoint>,
    pub mean_occupancy: Occupancy,
    pub degradation: Option<Degradation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TurnaroundStats {
    pub mean: f64,
    pub variance: f64,
    pub p99: f64,
}

pub fn turnaround_stats(values: &[f64]) -> TurnaroundStats {
    if values.is_empty() {
        return TurnaroundStats {
            mean: 0.0,
            variance: 0.0,
            p99: 0.0,
        };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((0.99 * n).ceil() as usize).clamp(1, sorted.len());
    TurnaroundStats {
        mean,
        variance,
        p99: sorted[rank - 1],
    }
}

impl SimReport {
    /// Combines isolated runs of different tasks into one reference: the
    /// request statistics of whichever has requests, the longest best-effort
    /// makespan.
    pub fn merge_isolated(self, other: SimReport) -> SimReport {
        let (mut base, extra) = if self.requests.is_empty() { (other, self) } else { (self, other) };
        base.best_effort_makespan_us = match (base.best_effort_makespan_us, extra.best_effort_makespan_us) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
        base.makespan_us = base.makespan_us.max(extra.makespan_us);
        base.kernels.extend(extra.kernels);
        base
    }

    pub fn kernel(&self, key: KernelKey) -> Option<&KernelRecord> {
        self.kernels.iter().find(|k| k.key == key)
    }

    /// Kernel records of one task in arrival order.
    pub fn task_kernels(&self, task: usize) -> impl Iterator<Item = &KernelRecord> {
        self.kernels.iter().filter(move |k| k.key.task == task)
    }
}

struct KernelAcc {
    key: KernelKey,
    demand: ResourceVector,
    arrival: SimTime,
    first_dispatch: Option<SimTime>,
    completion: Option<SimTime>,
}

/// Derives every report field from a complete event log. Ratios against
/// `baseline` are filled when one is given.
pub fn summarize(log: &EventLog, baseline: Option<&SimReport>) -> Result<SimReport, MetricsError> {
    let roles: Vec<Role> = log.header.tasks.iter().map(|t| t.role).collect();
    let limits = totals(&log.header.sm_limits).map(|x| x * u64::from(log.header.num_sms));

    let mut kernels: Vec<KernelAcc> = Vec::new();
    let mut kernel_index: HashMap<KernelId, usize> = HashMap::new();
    let mut block_kernel: HashMap<BlockId, KernelId> = HashMap::new();
    let mut costs: HashMap<KernelKey, SimTime> = HashMap::new();
    let mut requests: Vec<(u32, SimTime, Option<SimTime>, Option<SimTime>)> = Vec::new();
    let mut request_pos: HashMap<u32, usize> = HashMap::new();
    let mut be_done: Vec<SimTime> = Vec::new();
    let mut be_tasks_done = 0usize;

    let mut used = [0u64; 4];
    let mut series: Vec<OccupancyPoint> = Vec::new();
    let mut weighted = [0f64; 4];
    let mut last_t = SimTime::ZERO;
    let mut end = SimTime::ZERO;

    let adjust = |used: &mut [u64; 4], d: &ResourceVector, add: bool| {
        for (u, x) in used.iter_mut().zip(totals(d)) {
            if add {
                *u += x;
            } else {
                *u -= x;
            }
        }
    };

    let events = &log.events;
    let mut i = 0;
    while i < events.len() {
        let t = events[i].time;
        for (w, u) in weighted.iter_mut().zip(used) {
            *w += (t - last_t).ns() as f64 * u as f64;
        }
        last_t = t;
        let before = used;
        while i < events.len() && events[i].time == t {
            match &events[i].kind {
                EventKind::RequestArrival { request, .. } => {
                    request_pos.insert(*request, requests.len());
                    requests.push((*request, t, None, None));
                }
                EventKind::KernelArrival {
                    key, kernel, demand, ..
                } => {
                    kernel_index.insert(*kernel, kernels.len());
                    kernels.push(KernelAcc {
                        key: *key,
                        demand: *demand,
                        arrival: t,
                        first_dispatch: None,
                        completion: None,
                    });
                }
                EventKind::BlockDispatch { kernel, block, .. } => {
                    let k = &mut kernels[kernel_index[kernel]];
                    k.first_dispatch.get_or_insert(t);
                    block_kernel.insert(*block, *kernel);
                    adjust(&mut used, &k.demand, true);
                    if roles[k.key.task] == Role::LatencySensitive {
                        if let Some(&p) = request_pos.get(&k.key.unit) {
                            requests[p].2.get_or_insert(t);
                        }
                    }
                }
                EventKind::BlockComplete { kernel, .. } => {
                    adjust(&mut used, &kernels[kernel_index[kernel]].demand, false);
                }
                EventKind::PreemptSaveDone {
                    blocks,
                    beneficiary,
                    latency_ns,
                    ..
                } => {
                    for b in blocks {
                        let k = block_kernel[b];
                        adjust(&mut used, &kernels[kernel_index[&k]].demand, false);
                    }
                    if let Some(key) = beneficiary {
                        *costs.entry(*key).or_default() += SimTime(*latency_ns);
                    }
                }
                EventKind::KernelComplete { kernel, .. } => {
                    kernels[kernel_index[kernel]].completion = Some(t);
                }
                EventKind::RequestComplete { request, .. } => {
                    let p = *request_pos
                        .get(request)
                        .ok_or_else(|| MetricsError::IncompleteLog(format!("request {request} completed before arriving")))?;
                    requests[p].3 = Some(t);
                }
                EventKind::TaskComplete { task } if roles[*task] == Role::BestEffort => {
                    be_done.push(t);
                    be_tasks_done += 1;
                }
                _ => {}
            }
            i += 1;
        }
        end = t;
        if used != before || series.is_empty() {
            series.push(OccupancyPoint {
                time_us: t.as_us(),
                occupancy: Occupancy::from_totals(used, limits),
            });
        }
    }

    let mut records = Vec::with_capacity(requests.len());
    for (request, arrival, start, completion) in requests {
        let completion =
            completion.ok_or_else(|| MetricsError::IncompleteLog(format!("request {request} never completed")))?;
        let start = start.unwrap_or(completion);
        records.push(RequestRecord {
            request,
            arrival_us: arrival.as_us(),
            start_us: start.as_us(),
            completion_us: completion.as_us(),
            turnaround_us: turnaround(arrival.as_us(), completion.as_us())?,
        });
    }
    let be_count = roles.iter().filter(|r| **r == Role::BestEffort).count();
    if be_tasks_done != be_count {
        return Err(MetricsError::IncompleteLog(format!(
            "{} of {be_count} best-effort tasks completed",
            be_tasks_done
        )));
    }

    let mut kernel_records = Vec::with_capacity(kernels.len());
    for (kid, k) in kernels.iter().enumerate() {
        let (Some(first), Some(done)) = (k.first_dispatch, k.completion) else {
            return Err(MetricsError::IncompleteLog(format!(
                "kernel {} of task {} never completed",
                k.key.invocation, k.key.task
            )));
        };
        kernel_records.push(KernelRecord {
            key: k.key,
            kernel: kid as KernelId,
            arrival_us: k.arrival.as_us(),
            first_dispatch_us: first.as_us(),
            completion_us: done.as_us(),
            added_wait_us: (first - k.arrival).as_us(),
            preemption_cost_us: costs.get(&k.key).map_or(0.0, |c| c.as_us()),
        });
    }

    let per_request: Vec<f64> = records.iter().map(|r| r.turnaround_us).collect();
    let stats = turnaround_stats(&per_request);
    let best_effort_makespan_us = be_done.iter().max().map(|t| t.as_us());
    let span = end.ns() as f64;
    let mean_occupancy = if span > 0.0 {
        let f = |i: usize| if limits[i] == 0 { 0.0 } else { weighted[i] / span / limits[i] as f64 };
        Occupancy {
            threads: f(0),
            blocks: f(1),
            registers: f(2),
            shared_mem: f(3),
        }
    } else {
        Occupancy::default()
    };

    let degradation = baseline.map(|b| Degradation {
        turnaround_mean: (!per_request.is_empty() && b.turnaround_mean_us > 0.0)
            .then(|| stats.mean / b.turnaround_mean_us),
        best_effort_makespan: match (best_effort_makespan_us, b.best_effort_makespan_us) {
            (Some(c), Some(b)) if b > 0.0 => Some(c / b),
            _ => None,
        },
    });

    Ok(SimReport {
        requests: records,
        per_request_turnaround_us: per_request,
        turnaround_mean_us: stats.mean,
        turnaround_variance_us2: stats.variance,
        turnaround_p99_us: stats.p99,
        best_effort_makespan_us,
        makespan_us: end.as_us(),
        kernels: kernel_records,
        occupancy_series: series,
        mean_occupancy,
        degradation,
    })
}

/// One row per request: request, arrival, start, completion, turnaround.
pub fn results_csv(r: &SimReport) -> String {
    let mut out = String::from("request,arrival_us,start_us,completion_us,turnaround_us\n");
    for q in &r.requests {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            q.request, q.arrival_us, q.start_us, q.completion_us, q.turnaround_us
        );
    }
    out
}

/// Long format: one row per (time, resource).
pub fn occupancy_csv(r: &SimReport) -> String {
    let mut out = String::from("time_us,resource,fraction\n");
    for p in &r.occupancy_series {
        for (name, f) in p.occupancy.as_pairs() {
            let _ = writeln!(out, "{},{name},{f}", p.time_us);
        }
    }
    out
}

/// Per-kernel dispatch delay and charged preemption cost.
pub fn kernels_csv(r: &SimReport) -> String {
    let mut out =
        String::from("task,unit,invocation,arrival_us,first_dispatch_us,completion_us,added_wait_us,preemption_cost_us\n");
    for k in &r.kernels {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            k.key.task,
            k.key.unit,
            k.key.invocation,
            k.arrival_us,
            k.first_dispatch_us,
            k.completion_us,
            k.added_wait_us,
            k.preemption_cost_us
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub requests: usize,
    pub turnaround_mean_us: f64,
    pub turnaround_variance_us2: f64,
    pub turnaround_p99_us: f64,
    pub best_effort_makespan_us: Option<f64>,
    pub makespan_us: f64,
    pub mean_added_wait_us: f64,
    pub total_preemption_cost_us: f64,
    pub mean_occupancy: Occupancy,
    pub degradation: Option<Degradation>,
}

impl From<&SimReport> for Summary {
    fn from(r: &SimReport) -> Self {
        let waits: Vec<f64> = r.kernels.iter().map(|k| k.added_wait_us).collect();
        Summary {
            requests: r.requests.len(),
            turnaround_mean_us: r.turnaround_mean_us,
            turnaround_variance_us2: r.turnaround_variance_us2,
            turnaround_p99_us: r.turnaround_p99_us,
            best_effort_makespan_us: r.best_effort_makespan_us,
            makespan_us: r.makespan_us,
            mean_added_wait_us: if waits.is_empty() { 0.0 } else { waits.iter().sum::<f64>() / waits.len() as f64 },
            total_preemption_cost_us: r.kernels.iter().map(|k| k.preemption_cost_us).sum(),
            mean_occupancy: r.mean_occupancy,
            degradation: r.degradation,
        }
    }
}

pub fn summary_json(r: &SimReport) -> String {
    let mut s = serde_json::to_string_pretty(&Summary::from(r)).expect("summary serializes");
    s.push('\n');
    s
}
