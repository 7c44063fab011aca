//! Log auditing and replay: a recorded run is checked event by event
//! against a fresh resource ledger, and against a re-simulation.

use std::collections::HashMap;

use super::log::{EventKind, EventLog};
use super::Scenario;
use crate::error::ReplayError;
use crate::resource::ResourceVector;
use crate::scheduler::{empty_sms, BlockId, BlockPhase, KernelId, SmState};
use crate::time::SimTime;

/// State reconstructed from a log.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayState {
    pub time: SimTime,
    pub sms: Vec<SmState>,
    pub events: usize,
    pub kernels_completed: usize,
    pub blocks_completed: usize,
}

struct AuditBlock {
    kernel: KernelId,
    sm: u32,
    phase: BlockPhase,
}

/// Applies the log to an empty device, checking at every event that no SM
/// is over-committed, that block state transitions are legal and that the
/// clock never runs backwards.
pub fn audit(log: &EventLog) -> Result<ReplayState, ReplayError> {
    let h = &log.header;
    let mut sms = empty_sms(h.num_sms, h.sm_limits);
    let mut demands: HashMap<KernelId, (ResourceVector, u32)> = HashMap::new();
    let mut blocks: HashMap<BlockId, AuditBlock> = HashMap::new();
    let mut done_per_kernel: HashMap<KernelId, u32> = HashMap::new();
    let mut time = SimTime::ZERO;
    let mut kernels_completed = 0;
    let mut blocks_completed = 0;

    let fail = |index: usize, detail: String| ReplayError::Invariant { index, detail };

    for (i, e) in log.events.iter().enumerate() {
        if e.time < time {
            return Err(fail(i, format!("time {} precedes {}", e.time, time)));
        }
        if e.seq != i as u64 {
            return Err(fail(i, format!("sequence number {} out of order", e.seq)));
        }
        time = e.time;
        match &e.kind {
            EventKind::KernelArrival {
                kernel,
                demand,
                grid_blocks,
                ..
            } => {
                if demands.insert(*kernel, (*demand, *grid_blocks)).is_some() {
                    return Err(fail(i, format!("kernel {kernel} arrived twice")));
                }
            }
            EventKind::BlockDispatch {
                kernel, block, sm, restore, ..
            } => {
                let (demand, _) = *demands
                    .get(kernel)
                    .ok_or_else(|| fail(i, format!("dispatch of unknown kernel {kernel}")))?;
                let smv = sms
                    .get_mut(*sm as usize)
                    .ok_or_else(|| fail(i, format!("unknown SM {sm}")))?;
                if !demand.fits_within(&smv.free) {
                    return Err(fail(i, format!("SM {sm} over-committed by block {block}")));
                }
                smv.allocate(demand);
                smv.resident.push(*block);
                let phase = if *restore { BlockPhase::Restoring } else { BlockPhase::Executing };
                match blocks.get_mut(block) {
                    Some(b) if b.phase == BlockPhase::Checkpointed => {
                        b.phase = phase;
                        b.sm = *sm;
                    }
                    Some(_) => return Err(fail(i, format!("block {block} dispatched while live"))),
                    None => {
                        blocks.insert(
                            *block,
                            AuditBlock {
                                kernel: *kernel,
                                sm: *sm,
                                phase,
                            },
                        );
                    }
                }
            }
            EventKind::PreemptRestoreDone { block: Some(block), .. } => {
                let b = blocks
                    .get_mut(block)
                    .filter(|b| b.phase == BlockPhase::Restoring)
                    .ok_or_else(|| fail(i, format!("restore of block {block} that is not restoring")))?;
                b.phase = BlockPhase::Executing;
            }
            EventKind::BlockComplete { kernel, block, sm } => {
                let b = blocks
                    .get_mut(block)
                    .filter(|b| b.phase == BlockPhase::Executing && b.sm == *sm && b.kernel == *kernel)
                    .ok_or_else(|| fail(i, format!("completion of block {block} that is not executing on SM {sm}")))?;
                b.phase = BlockPhase::Done;
                release(&mut sms, &demands, b.kernel, *sm, *block).map_err(|d| fail(i, d))?;
                blocks_completed += 1;
                *done_per_kernel.entry(*kernel).or_default() += 1;
            }
            EventKind::BlockCheckpoint { block, .. } => {
                let b = blocks
                    .get_mut(block)
                    .filter(|b| b.phase == BlockPhase::Executing)
                    .ok_or_else(|| fail(i, format!("checkpoint of block {block} that is not executing")))?;
                b.phase = BlockPhase::Saving;
            }
            EventKind::PreemptSaveDone { blocks: victims, .. } => {
                for v in victims {
                    let b = blocks
                        .get_mut(v)
                        .filter(|b| b.phase == BlockPhase::Saving)
                        .ok_or_else(|| fail(i, format!("save of block {v} that is not saving")))?;
                    b.phase = BlockPhase::Checkpointed;
                    let (kernel, sm) = (b.kernel, b.sm);
                    release(&mut sms, &demands, kernel, sm, *v).map_err(|d| fail(i, d))?;
                }
            }
            EventKind::KernelComplete { kernel, .. } => {
                let (_, grid) = demands
                    .get(kernel)
                    .ok_or_else(|| fail(i, format!("completion of unknown kernel {kernel}")))?;
                let done = done_per_kernel.get(kernel).copied().unwrap_or(0);
                if done != *grid {
                    return Err(fail(i, format!("kernel {kernel} completed with {done} of {grid} blocks")));
                }
                kernels_completed += 1;
            }
            _ => {}
        }
    }
    if let Some(sm) = sms.iter().find(|sm| sm.free != sm.limits) {
        return Err(fail(log.events.len(), format!("SM {} still holds resources at the end", sm.sm_id)));
    }
    Ok(ReplayState {
        time,
        sms,
        events: log.events.len(),
        kernels_completed,
        blocks_completed,
    })
}

fn release(
    sms: &mut [SmState],
    demands: &HashMap<KernelId, (ResourceVector, u32)>,
    kernel: KernelId,
    sm: u32,
    block: BlockId,
) -> Result<(), String> {
    let demand = demands[&kernel].0;
    let s = &mut sms[sm as usize];
    let pos = s
        .resident
        .iter()
        .position(|&b| b == block)
        .ok_or_else(|| format!("block {block} not resident on SM {sm}"))?;
    s.resident.remove(pos);
    s.free += demand;
    if !s.free.fits_within(&s.limits) {
        return Err(format!("SM {sm} released more than it holds"));
    }
    Ok(())
}

/// Re-runs the scenario, compares the result with `log` event by event and
/// audits it.
pub fn replay(log: &EventLog, s: &Scenario) -> Result<ReplayState, ReplayError> {
    let fresh = super::simulate(s)?;
    if fresh.header != log.header {
        return Err(ReplayError::Divergence {
            index: 0,
            expected: format!("{:?}", fresh.header),
            found: format!("{:?}", log.header),
        });
    }
    let n = fresh.events.len().max(log.events.len());
    for i in 0..n {
        match (fresh.events.get(i), log.events.get(i)) {
            (Some(a), Some(b)) if a == b => {}
            (a, b) => {
                let show = |e: Option<&super::SimEvent>| e.map_or_else(|| "end of log".to_string(), |e| e.to_string());
                return Err(ReplayError::Divergence {
                    index: i,
                    expected: show(a),
                    found: show(b),
                });
            }
        }
    }
    audit(log)
}
