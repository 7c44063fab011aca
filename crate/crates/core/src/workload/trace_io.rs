use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{KernelInvocation, TaskKind, TaskTrace, TransferOp};
use crate::error::TraceError;
use crate::resource::{GpuConfig, KernelDescriptor};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceRecord {
    task_id: String,
    kind: TaskKind,
    global_mem_alloc_mb: u64,
    invocations: Vec<InvocationRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InvocationRecord {
    name: String,
    grid_blocks: u32,
    threads_per_block: u32,
    regs_per_thread: u32,
    #[serde(default)]
    shared_mem_per_block_kb: u32,
    isolated_duration_us: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gap_after_us: Option<f64>,
    #[serde(default)]
    transfers: Vec<TransferOp>,
}

impl From<InvocationRecord> for KernelInvocation {
    fn from(r: InvocationRecord) -> Self {
        KernelInvocation {
            kernel: KernelDescriptor {
                name: r.name,
                grid_blocks: r.grid_blocks,
                threads_per_block: r.threads_per_block,
                regs_per_thread: r.regs_per_thread,
                shared_mem_per_block_kb: r.shared_mem_per_block_kb,
                isolated_duration_us: r.isolated_duration_us,
            },
            gap_after_us: r.gap_after_us,
            transfers: r.transfers,
        }
    }
}

impl From<&KernelInvocation> for InvocationRecord {
    fn from(inv: &KernelInvocation) -> Self {
        let k = &inv.kernel;
        InvocationRecord {
            name: k.name.clone(),
            grid_blocks: k.grid_blocks,
            threads_per_block: k.threads_per_block,
            regs_per_thread: k.regs_per_thread,
            shared_mem_per_block_kb: k.shared_mem_per_block_kb,
            isolated_duration_us: k.isolated_duration_us,
            gap_after_us: inv.gap_after_us,
            transfers: inv.transfers.clone(),
        }
    }
}

/// Parses and validates a trace document. `origin` only labels diagnostics.
pub fn parse_trace(text: &str, origin: &Path, gpu: &GpuConfig) -> Result<TaskTrace, TraceError> {
    let record: TraceRecord = serde_json::from_str(text).map_err(|e| TraceError::Parse {
        path: origin.to_path_buf(),
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })?;
    let trace = TaskTrace {
        task_id: record.task_id,
        kind: record.kind,
        global_mem_alloc_mb: record.global_mem_alloc_mb,
        invocations: record.invocations.into_iter().map(Into::into).collect(),
    };
    trace.validate(gpu).map_err(|source| TraceError::Invalid {
        path: origin.to_path_buf(),
        source,
    })?;
    Ok(trace)
}

pub fn load_trace(path: &Path, gpu: &GpuConfig) -> Result<TaskTrace, TraceError> {
    let text = std::fs::read_to_string(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_trace(&text, path, gpu)
}

pub fn trace_to_string(t: &TaskTrace) -> String {
    let record = TraceRecord {
        task_id: t.task_id.clone(),
        kind: t.kind,
        global_mem_alloc_mb: t.global_mem_alloc_mb,
        invocations: t.invocations.iter().map(Into::into).collect(),
    };
    let mut s = serde_json::to_string_pretty(&record).expect("trace serializes");
    s.push('\n');
    s
}

pub fn emit_trace(t: &TaskTrace, path: &Path) -> std::io::Result<()> {
    std::fs::write(path, trace_to_string(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{TransferDirection, TransferPosition};

    const TWO_KERNELS: &str = r#"{
  "task_id": "infer",
  "kind": "inference",
  "global_mem_alloc_mb": 512,
  "invocations": [
    {"name": "a", "grid_blocks": 32, "threads_per_block": 64, "regs_per_thread": 32,
     "shared_mem_per_block_kb": 0, "isolated_duration_us": 137.0, "gap_after_us": 20.0,
     "transfers": [{"direction": "host-to-device", "size_kb": 1000.0, "position": "before-kernel"}]},
    {"name": "b", "grid_blocks": 512, "threads_per_block": 64, "regs_per_thread": 32,
     "shared_mem_per_block_kb": 0, "isolated_duration_us": 2.0}
  ]
}"#;

    fn origin() -> &'static Path {
        Path::new("mem.json")
    }

    #[test]
    fn parses_two_kernels_in_order() {
        let t = parse_trace(TWO_KERNELS, origin(), &GpuConfig::default()).unwrap();
        assert_eq!(t.invocations.len(), 2);
        assert_eq!(t.invocations[0].kernel.name, "a");
        assert_eq!(t.invocations[1].kernel.name, "b");
        assert_eq!(t.invocations[1].gap_after_us, None);
        assert_eq!(
            t.invocations[0].transfers[0],
            TransferOp {
                direction: TransferDirection::HostToDevice,
                size_kb: 1000.0,
                position: TransferPosition::BeforeKernel
            }
        );
        let again = parse_trace(&trace_to_string(&t), origin(), &GpuConfig::default()).unwrap();
        assert_eq!(again, t);
    }

    #[test]
    fn empty_invocations_rejected() {
        let doc = r#"{"task_id":"x","kind":"training","global_mem_alloc_mb":1,"invocations":[]}"#;
        let err = parse_trace(doc, origin(), &GpuConfig::default()).unwrap_err();
        assert!(matches!(err, TraceError::Invalid { .. }), "{err}");
    }

    #[test]
    fn oversized_block_names_kernel() {
        let doc = TWO_KERNELS.replacen("\"threads_per_block\": 64", "\"threads_per_block\": 2048", 1);
        let err = parse_trace(&doc, origin(), &GpuConfig::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("kernel 'a'"), "{msg}");
    }

    #[test]
    fn parse_error_has_locus() {
        let doc = "{\n  \"task_id\": \"x\",\n  \"kind\": 7\n}";
        match parse_trace(doc, origin(), &GpuConfig::default()).unwrap_err() {
            TraceError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_field_rejected() {
        let doc = TWO_KERNELS.replacen("\"name\": \"a\"", "\"name\": \"a\", \"bogus\": 1", 1);
        assert!(matches!(
            parse_trace(&doc, origin(), &GpuConfig::default()),
            Err(TraceError::Parse { .. })
        ));
    }
}
