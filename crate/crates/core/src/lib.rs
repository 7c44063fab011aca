//! Discrete-event simulation of thread-block scheduling on a GPU shared by
//! latency-sensitive and best-effort tasks.

pub mod engine;
pub mod error;
pub mod mechanisms;
pub mod metrics;
pub mod preemption;
pub mod resource;
pub mod scenario_file;
pub mod scheduler;
pub mod time;
pub mod workload;

pub use engine::{run, run_baseline, simulate, EventLog, Role, RunOutput, Scenario, TaskSpec};
pub use error::*;
pub use metrics::SimReport;
pub use scenario_file::{load_scenario, ScenarioDoc};
pub use time::SimTime;
