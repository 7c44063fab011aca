//! TOML scenario files.
//!
//! ```toml
//! seed = 7
//! gap_default_us = 20
//!
//! [gpu]
//! num_sms = 82
//!
//! [mechanism]
//! kind = "streams"            # streams | timeslicing | mps
//!
//! [arrivals]
//! mode = "single-stream"      # or "poisson" with rate_per_s
//! num_requests = 20
//!
//! [[tasks]]
//! trace = "traces/infer.json" # relative to this file
//! role = "latency-sensitive"
//! priority = -2
//!
//! [[tasks]]
//! trace = "traces/train.json"
//! role = "best-effort"
//!
//! [preemption]
//! enabled = true
//! policy = "pre-drain"
//! cost_model = { fixed_save_cost_us = 73 }
//! ```
//!
//! Unknown keys anywhere are rejected. Any scalar can be overridden with a
//! dotted key before the document is built, which is how sweeps vary one
//! parameter at a time.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::engine::{Role, Scenario, TaskSpec, DEFAULT_GAP_US, DEFAULT_HOST_BANDWIDTH_GBPS, DEFAULT_STARVATION_HORIZON_US};
use crate::error::{ScenarioError, ValidationError};
use crate::mechanisms::{MechanismConfig, MechanismKind, LOWEST_STREAM_PRIORITY};
use crate::preemption::{PreemptionConfig, PreemptionCostModel, PreemptionPolicy};
use crate::resource::{GpuConfig, ResourceVector};
use crate::scheduler::LeftoverOrder;
use crate::workload::{load_trace, ArrivalPattern};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    contention_alpha: f64,
    #[serde(default = "default_gap")]
    gap_default_us: f64,
    #[serde(default = "default_bandwidth")]
    host_bandwidth_gbps: f64,
    #[serde(default = "default_horizon")]
    starvation_horizon_us: f64,
    #[serde(default)]
    leftover_order: LeftoverOrder,
    #[serde(default)]
    gpu: GpuConfig,
    mechanism: MechanismSection,
    arrivals: Option<ArrivalPattern>,
    tasks: Vec<TaskEntry>,
    #[serde(default)]
    preemption: PreemptionSection,
}

fn default_gap() -> f64 {
    DEFAULT_GAP_US
}

fn default_bandwidth() -> f64 {
    DEFAULT_HOST_BANDWIDTH_GBPS
}

fn default_horizon() -> f64 {
    DEFAULT_STARVATION_HORIZON_US
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MechanismSection {
    kind: MechanismKind,
    /// Time-slicing; fall back to the GPU's values.
    slice_length_us: Option<f64>,
    ctx_save_us: Option<f64>,
    ctx_restore_us: Option<f64>,
    #[serde(default)]
    strict_head_of_line: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskEntry {
    trace: PathBuf,
    role: Role,
    /// Stream priority (streams only), -2 highest to 0 lowest.
    priority: Option<i8>,
    /// MPS thread cap in percent.
    thread_limit_pct: Option<f64>,
    #[serde(default = "one")]
    iterations: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PreemptionSection {
    enabled: bool,
    policy: PreemptionPolicy,
    leave_space_threshold_us: Option<f64>,
    cost_model: PreemptionCostModel,
    /// Guaranteed share per MPS client, keyed by task id.
    min_reservation: BTreeMap<String, ResourceVector>,
}

/// Short names accepted by [`ScenarioDoc::set`].
const ALIASES: &[(&str, &str)] = &[
    ("mechanism", "mechanism.kind"),
    ("slice_length", "mechanism.slice_length_us"),
    ("slice_length_us", "mechanism.slice_length_us"),
    ("policy", "preemption.policy"),
    ("alpha", "contention_alpha"),
    ("gap", "gap_default_us"),
];

/// A parsed scenario file that has not yet been turned into a [`Scenario`].
#[derive(Debug, Clone)]
pub struct ScenarioDoc {
    path: PathBuf,
    table: toml::Table,
}

impl ScenarioDoc {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    /// `path` locates relative trace paths and labels diagnostics.
    pub fn parse(text: &str, path: &Path) -> Result<Self, ScenarioError> {
        let table = text.parse::<toml::Table>().map_err(|e| ScenarioError::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Ok(ScenarioDoc {
            path: path.to_path_buf(),
            table,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Overrides a scalar by dotted key. `raw` is read as a TOML value when
    /// it parses as one and as a bare string otherwise, so `mps` and `2000`
    /// both work on the command line.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), ScenarioError> {
        let key = ALIASES.iter().find(|(a, _)| *a == key).map_or(key, |(_, k)| k);
        let value = match format!("v = {raw}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("single key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let parts: Vec<&str> = key.split('.').collect();
        let (last, parents) = parts.split_last().expect("split yields one part");
        let mut table = &mut self.table;
        for p in parents {
            let entry = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = match entry {
                toml::Value::Table(t) => t,
                _ => {
                    return Err(self.parse_error(format!("cannot override '{key}': '{p}' is not a table")));
                }
            };
        }
        if matches!(table.get(*last), Some(toml::Value::Table(_) | toml::Value::Array(_))) {
            return Err(self.parse_error(format!("cannot override '{key}': not a scalar")));
        }
        table.insert(last.to_string(), value);
        Ok(())
    }

    fn parse_error(&self, msg: String) -> ScenarioError {
        ScenarioError::Parse {
            path: self.path.clone(),
            msg,
        }
    }

    /// Resolves trace files and mechanism parameters into a validated
    /// scenario.
    pub fn build(&self) -> Result<Scenario, ScenarioError> {
        let file: ScenarioFile = toml::Value::Table(self.table.clone())
            .try_into()
            .map_err(|e: toml::de::Error| self.parse_error(e.to_string()))?;
        let invalid = |msg: String| ScenarioError::Invalid {
            path: self.path.clone(),
            source: ValidationError::new(msg),
        };
        file.gpu.validate().map_err(|source| ScenarioError::Invalid {
            path: self.path.clone(),
            source,
        })?;

        let base = self.path.parent().unwrap_or(Path::new("."));
        let mut tasks = Vec::with_capacity(file.tasks.len());
        for entry in &file.tasks {
            let trace = load_trace(&base.join(&entry.trace), &file.gpu)?;
            tasks.push(TaskSpec {
                trace,
                role: entry.role,
                iterations: entry.iterations,
            });
        }
        let ids: Vec<&str> = tasks.iter().map(|t| t.trace.task_id.as_str()).collect();
        for (i, id) in ids.iter().enumerate() {
            if ids[..i].contains(id) {
                return Err(invalid(format!("duplicate task id '{id}'")));
            }
        }

        let m = &file.mechanism;
        let mechanism = match m.kind {
            MechanismKind::Streams => MechanismConfig::PriorityStreams {
                priorities: file
                    .tasks
                    .iter()
                    .map(|t| t.priority.unwrap_or(LOWEST_STREAM_PRIORITY))
                    .collect(),
            },
            MechanismKind::Timeslicing => MechanismConfig::TimeSlicing {
                slice_length_us: m.slice_length_us.unwrap_or(file.gpu.slice_length_us),
                ctx_save_cost_us: m.ctx_save_us.unwrap_or(file.gpu.ctx_save_cost_us),
                ctx_restore_cost_us: m.ctx_restore_us.unwrap_or(file.gpu.ctx_restore_cost_us),
            },
            MechanismKind::Mps => {
                if let Some(unknown) = file.preemption.min_reservation.keys().find(|k| !ids.contains(&k.as_str())) {
                    return Err(invalid(format!("min_reservation names unknown task '{unknown}'")));
                }
                MechanismConfig::Mps {
                    thread_limit_pct: file.tasks.iter().map(|t| t.thread_limit_pct.unwrap_or(100.0)).collect(),
                    min_reservation: ids
                        .iter()
                        .map(|id| file.preemption.min_reservation.get(*id).copied())
                        .collect(),
                    strict_head_of_line: m.strict_head_of_line,
                }
            }
        };
        if m.kind != MechanismKind::Mps && !file.preemption.min_reservation.is_empty() {
            return Err(invalid("min_reservation applies only to mps".into()));
        }

        let scenario = Scenario {
            gpu: file.gpu,
            mechanism,
            tasks,
            arrivals: file.arrivals.unwrap_or_else(|| ArrivalPattern::single_stream(1)),
            contention_alpha: file.contention_alpha,
            gap_default_us: file.gap_default_us,
            host_bandwidth_gbps: file.host_bandwidth_gbps,
            seed: file.seed,
            preemption: PreemptionConfig {
                enabled: file.preemption.enabled,
                policy: file.preemption.policy,
                cost_model: file.preemption.cost_model,
                leave_space_threshold_us: file.preemption.leave_space_threshold_us,
            },
            leftover_order: file.leftover_order,
            starvation_horizon_us: file.starvation_horizon_us,
        };
        scenario.validate().map_err(|source| ScenarioError::Invalid {
            path: self.path.clone(),
            source,
        })?;
        Ok(scenario)
    }
}

/// Loads and builds a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    ScenarioDoc::load(path)?.build()
}
