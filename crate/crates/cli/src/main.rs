use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use blocksim::engine::{audit, replay, run_with_baseline, EventLog, RunOutput};
use blocksim::metrics::{kernels_csv, occupancy_csv, results_csv, summary_json, Summary};
use blocksim::resource::{classify_kernel, limiting_resource, GpuConfig};
use blocksim::workload::{emit_trace, load_trace, synthesize_trace, trace_stats, SynthesisSpec, TaskKind};
use blocksim::{Scenario, ScenarioDoc};

/// Simulates thread-block scheduling of co-located GPU tasks.
#[derive(Parser)]
#[command(name = "blocksim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its results, summary, occupancy and event log.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a scenario once per value of one parameter.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Base seed; cell i runs with base + i.
        #[arg(long)]
        seed: Option<u64>,
        /// Dotted scenario key, e.g. `mechanism.kind` or `preemption.policy`.
        #[arg(long)]
        param: String,
        /// Comma-separated values for the parameter.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Classify the kernels of a trace file.
    TraceStats {
        trace: PathBuf,
        /// Takes the GPU from this scenario instead of the default device.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Check an event log for resource conservation, and against a fresh
    /// simulation when a scenario is given.
    Replay {
        log: PathBuf,
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Seed override the log was recorded with.
        #[arg(long, requires = "scenario")]
        seed: Option<u64>,
    },
    /// Generate a trace with target shares of large and long-running kernels.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Kind::Training)]
        kind: Kind,
        #[arg(long, default_value_t = 200)]
        kernels: usize,
        /// Percent of kernels larger than the device's resident capacity.
        #[arg(long, default_value_t = 0.0)]
        large_pct: f64,
        /// Percent of runtime spent in long-running kernels.
        #[arg(long, default_value_t = 0.0)]
        long_pct: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "synthetic")]
        id: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Training,
    Inference,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { scenario, out, seed } => cmd_run(&scenario, &out, seed),
        Command::Sweep {
            scenario,
            out,
            seed,
            param,
            values,
        } => cmd_sweep(&scenario, &out, seed, &param, &values),
        Command::TraceStats { trace, scenario } => cmd_trace_stats(&trace, scenario.as_deref()),
        Command::Replay { log, scenario, seed } => cmd_replay(&log, scenario.as_deref(), seed),
        Command::Synth {
            out,
            kind,
            kernels,
            large_pct,
            long_pct,
            seed,
            id,
        } => {
            let spec = SynthesisSpec {
                task_id: id,
                kind: match kind {
                    Kind::Training => TaskKind::Training,
                    Kind::Inference => TaskKind::Inference,
                },
                num_kernels: kernels,
                frac_large: large_pct / 100.0,
                frac_long_running_time: long_pct / 100.0,
                seed,
                ..SynthesisSpec::default()
            };
            let trace = synthesize_trace(&spec, &GpuConfig::default())?;
            emit_trace(&trace, &out).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} kernels to {}", trace.invocations.len(), out.display());
            Ok(())
        }
    }
}

fn load_doc(path: &Path, seed: Option<u64>) -> Result<ScenarioDoc> {
    let mut doc = ScenarioDoc::load(path)?;
    if let Some(seed) = seed {
        doc.set("seed", &seed.to_string())?;
    }
    Ok(doc)
}

fn write_outputs(out: &Path, run: &RunOutput) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let r = &run.report;
    let files = [
        ("results.csv", results_csv(r)),
        ("summary.json", summary_json(r)),
        ("occupancy.csv", occupancy_csv(r)),
        ("kernels.csv", kernels_csv(r)),
        ("events.jsonl", run.log.to_jsonl()),
    ];
    for (name, body) in files {
        let path = out.join(name);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_run(path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let s = load_doc(path, seed)?.build()?;
    let run = run_with_baseline(&s)?;
    write_outputs(out, &run)?;
    let sum = Summary::from(&run.report);
    println!("requests              {}", sum.requests);
    println!("turnaround mean       {:.3} µs", sum.turnaround_mean_us);
    println!("turnaround variance   {:.3} µs²", sum.turnaround_variance_us2);
    println!("turnaround p99        {:.3} µs", sum.turnaround_p99_us);
    if let Some(m) = sum.best_effort_makespan_us {
        println!("best-effort makespan  {m:.3} µs");
    }
    println!("makespan              {:.3} µs", sum.makespan_us);
    println!("mean added wait       {:.3} µs", sum.mean_added_wait_us);
    println!("preemption cost       {:.3} µs", sum.total_preemption_cost_us);
    if let Some(d) = sum.degradation {
        if let Some(t) = d.turnaround_mean {
            println!("turnaround vs alone   {t:.3}x");
        }
        if let Some(m) = d.best_effort_makespan {
            println!("makespan vs alone     {m:.3}x");
        }
    }
    println!("outputs in {}", out.display());
    Ok(())
}

struct Cell {
    value: String,
    seed: u64,
    outcome: Result<Summary>,
}

fn cell_dir(i: usize, value: &str) -> String {
    let clean: String = value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    format!("{i:02}-{clean}")
}

fn run_cell(doc: &ScenarioDoc, param: &str, value: &str, seed: u64, out: &Path) -> Result<Summary> {
    let mut doc = doc.clone();
    doc.set(param, value)?;
    doc.set("seed", &seed.to_string())?;
    let s: Scenario = doc.build()?;
    let run = run_with_baseline(&s)?;
    write_outputs(out, &run)?;
    Ok(Summary::from(&run.report))
}

fn cmd_sweep(path: &Path, out: &Path, seed: Option<u64>, param: &str, values: &[String]) -> Result<()> {
    let doc = load_doc(path, seed)?;
    let base = match seed {
        Some(s) => s,
        None => doc.build()?.seed,
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let cells: Vec<Cell> = values
        .par_iter()
        .enumerate()
        .map(|(i, value)| {
            let seed = base + i as u64;
            let outcome = run_cell(&doc, param, value, seed, &out.join(cell_dir(i, value)));
            Cell {
                value: value.clone(),
                seed,
                outcome,
            }
        })
        .collect();

    let table = out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&table).with_context(|| format!("writing {}", table.display()))?;
    w.write_record([
        param,
        "seed",
        "status",
        "requests",
        "turnaround_mean_us",
        "turnaround_variance_us2",
        "turnaround_p99_us",
        "best_effort_makespan_us",
        "mean_added_wait_us",
        "total_preemption_cost_us",
        "error",
    ])?;
    println!(
        "{:<14} {:>6} {:>6} {:>14} {:>16} {:>14} {:>14} {:>12}",
        param, "seed", "status", "mean µs", "variance µs²", "p99 µs", "makespan µs", "wait µs"
    );
    let mut failed = 0;
    for c in &cells {
        match &c.outcome {
            Ok(s) => {
                let makespan = s.best_effort_makespan_us.map(|m| m.to_string()).unwrap_or_default();
                w.write_record([
                    c.value.clone(),
                    c.seed.to_string(),
                    "ok".into(),
                    s.requests.to_string(),
                    s.turnaround_mean_us.to_string(),
                    s.turnaround_variance_us2.to_string(),
                    s.turnaround_p99_us.to_string(),
                    makespan,
                    s.mean_added_wait_us.to_string(),
                    s.total_preemption_cost_us.to_string(),
                    String::new(),
                ])?;
                println!(
                    "{:<14} {:>6} {:>6} {:>14.3} {:>16.3} {:>14.3} {:>14.3} {:>12.3}",
                    c.value,
                    c.seed,
                    "ok",
                    s.turnaround_mean_us,
                    s.turnaround_variance_us2,
                    s.turnaround_p99_us,
                    s.best_effort_makespan_us.unwrap_or(f64::NAN),
                    s.mean_added_wait_us
                );
            }
            Err(e) => {
                failed += 1;
                let msg = format!("{e:#}");
                let mut row = vec![c.value.clone(), c.seed.to_string(), "failed".into()];
                row.extend(std::iter::repeat_n(String::new(), 7));
                row.push(msg.clone());
                w.write_record(&row)?;
                println!("{:<14} {:>6} {:>6}  {msg}", c.value, c.seed, "failed");
            }
        }
    }
    w.flush()?;
    if failed > 0 {
        bail!("{failed} of {} sweep cells failed (see {})", cells.len(), table.display());
    }
    Ok(())
}

fn cmd_trace_stats(path: &Path, scenario: Option<&Path>) -> Result<()> {
    let gpu = match scenario {
        Some(p) => ScenarioDoc::load(p)?.build()?.gpu,
        None => GpuConfig::default(),
    };
    let trace = load_trace(path, &gpu)?;
    let st = trace_stats(&trace, &gpu);
    println!("trace                 {}", trace.task_id);
    println!("total kernels         {}", st.total_kernels);
    println!("large kernels         {:.2}%", st.pct_large_kernels);
    println!("long-running runtime  {:.2}%", st.pct_long_running_runtime);
    println!();
    println!("{:<5} {:<24} {:>8} {:>8} {:>12} {:<11} flags", "#", "kernel", "grid", "threads", "duration µs", "limit");
    for (i, inv) in trace.invocations.iter().enumerate() {
        let k = &inv.kernel;
        let class = classify_kernel(k, &gpu);
        let mut flags = Vec::new();
        if class.large {
            flags.push("large");
        }
        if class.long_running {
            flags.push("long-running");
        }
        println!(
            "{:<5} {:<24} {:>8} {:>8} {:>12.3} {:<11} {}",
            i,
            k.name,
            k.grid_blocks,
            k.threads_per_block,
            k.isolated_duration_us,
            limiting_resource(k, &gpu).as_str(),
            flags.join(",")
        );
    }
    Ok(())
}

fn cmd_replay(path: &Path, scenario: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let log = EventLog::read_jsonl(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
    let state = match scenario {
        Some(p) => {
            let s = load_doc(p, seed)?.build()?;
            replay(&log, &s)?
        }
        None => audit(&log)?,
    };
    println!(
        "ok: {} events, {} kernels and {} blocks completed, final time {}",
        state.events, state.kernels_completed, state.blocks_completed, state.time
    );
    Ok(())
}
