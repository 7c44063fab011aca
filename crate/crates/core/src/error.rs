use std::path::PathBuf;

use thiserror::Error;

/// A value that violates a domain invariant.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct ValidationError(pub String);

impl ValidationError {
    pub fn new(msg: impl Into<String>) -> Self {
        ValidationError(msg.into())
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("{path}: invalid trace: {source}")]
    Invalid {
        path: PathBuf,
        #[source]
        source: ValidationError,
    },
}

/// Which footprint dimension rejected a process under time-slicing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FootprintResource {
    GlobalMem,
    Registers,
    SharedMem,
}

impl std::fmt::Display for FootprintResource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FootprintResource::GlobalMem => "global memory",
            FootprintResource::Registers => "registers",
            FootprintResource::SharedMem => "shared memory",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("out of memory admitting process '{client}': {resource} exhausted (requested {requested}, {available} available)")]
pub struct AdmissionError {
    pub client: String,
    pub resource: FootprintResource,
    pub requested: u64,
    pub available: u64,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Admission(#[from] AdmissionError),
    #[error("invalid scenario: {0}")]
    Invalid(#[from] ValidationError),
    #[error("starvation at t={at_us}µs: {detail}")]
    Starvation { at_us: f64, detail: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("log diverges from simulation at event {index}: expected {expected}, found {found}")]
    Divergence {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("invariant violated at event {index}: {detail}")]
    Invariant { index: usize, detail: String },
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("negative duration: completion {completion_us}µs precedes arrival {arrival_us}µs")]
    NegativeDuration { arrival_us: f64, completion_us: f64 },
    #[error("incomplete log: {0}")]
    IncompleteLog(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("infeasible synthesis spec: {0}")]
pub struct SynthesisError(pub String);

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("{path}: {source}")]
    Invalid {
        path: PathBuf,
        #[source]
        source: ValidationError,
    },
}
