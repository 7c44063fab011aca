//! Fine-grained thread-block preemption: context-save cost estimates,
//! victim selection, and the triggers that hide preemption latency behind
//! transfers and earlier kernels of a sequence.

use serde::{Deserialize, Serialize};

use crate::error::ValidationError;
use crate::resource::{GpuConfig, ResourceVector};
use crate::scheduler::{BlockId, SmState};
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SharePolicy {
    /// Each SM saves over its 1/num_sms share of bandwidth, all in parallel.
    #[default]
    PerSmFair,
    /// SMs save one after another, each using the whole bandwidth.
    Full,
}

/// Context state that must move to global memory on preemption. Sizes are
/// KB, bandwidth GB/s (decimal units, so KB per GB/s is microseconds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreemptionCostModel {
    /// Constant bank; device-wide, so counted once for the whole GPU.
    pub constant_kb: f64,
    pub l1_shared_kb: f64,
    pub register_file_kb: f64,
    pub l2_kb: f64,
    pub bandwidth_gbps: f64,
    pub share_policy: SharePolicy,
    /// Replaces the size/bandwidth estimate when set.
    pub fixed_save_cost_us: Option<f64>,
}

impl Default for PreemptionCostModel {
    fn default() -> Self {
        PreemptionCostModel {
            constant_kb: 64.0,
            l1_shared_kb: 128.0,
            register_file_kb: 256.0,
            l2_kb: 6144.0,
            bandwidth_gbps: 936.0,
            share_policy: SharePolicy::PerSmFair,
            fixed_save_cost_us: None,
        }
    }
}

impl PreemptionCostModel {
    pub fn with_fixed_cost(us: f64) -> Self {
        PreemptionCostModel {
            fixed_save_cost_us: Some(us),
            ..Default::default()
        }
    }

    pub fn per_sm_state_kb(&self) -> f64 {
        self.constant_kb + self.l1_shared_kb + self.register_file_kb
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        let sizes = [self.constant_kb, self.l1_shared_kb, self.register_file_kb, self.l2_kb];
        if sizes.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(ValidationError::new("preemption state sizes must be non-negative"));
        }
        if !(self.bandwidth_gbps.is_finite() && self.bandwidth_gbps > 0.0) {
            return Err(ValidationError::new("preemption bandwidth must be positive"));
        }
        if let Some(c) = self.fixed_save_cost_us {
            if !(c.is_finite() && c >= 0.0) {
                return Err(ValidationError::new("fixed_save_cost_us must be non-negative"));
            }
        }
        Ok(())
    }
}

/// Time to save the whole device's context, µs.
pub fn cost_full_gpu(m: &PreemptionCostModel, g: &GpuConfig) -> f64 {
    if let Some(c) = m.fixed_save_cost_us {
        return c;
    }
    let total_kb = m.constant_kb + f64::from(g.num_sms) * (m.l1_shared_kb + m.register_file_kb) + m.l2_kb;
    total_kb / m.bandwidth_gbps
}

/// Time to save the context of `sms_affected` SMs, µs.
pub fn cost_per_sm(m: &PreemptionCostModel, g: &GpuConfig, sms_affected: u32) -> f64 {
    if let Some(c) = m.fixed_save_cost_us {
        return c;
    }
    let n = sms_affected.max(1);
    match m.share_policy {
        SharePolicy::PerSmFair => m.per_sm_state_kb() / (m.bandwidth_gbps / f64::from(g.num_sms)),
        SharePolicy::Full => f64::from(n) * m.per_sm_state_kb() / m.bandwidth_gbps,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trigger {
    OnArrival,
    PreDrain,
    TransferOverlap,
    LeaveSpace,
}

/// Which triggers are active. Every hiding policy keeps on-arrival
/// preemption as the fallback for whatever it could not hide.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreemptionPolicy {
    #[default]
    OnArrival,
    PreDrain,
    TransferOverlap,
    LeaveSpace,
    Combined,
}

impl PreemptionPolicy {
    pub const ALL: [PreemptionPolicy; 5] = [
        PreemptionPolicy::OnArrival,
        PreemptionPolicy::PreDrain,
        PreemptionPolicy::TransferOverlap,
        PreemptionPolicy::LeaveSpace,
        PreemptionPolicy::Combined,
    ];

    pub fn uses(self, t: Trigger) -> bool {
        match t {
            Trigger::OnArrival => true,
            Trigger::PreDrain => matches!(self, PreemptionPolicy::PreDrain | PreemptionPolicy::Combined),
            Trigger::TransferOverlap => {
                matches!(self, PreemptionPolicy::TransferOverlap | PreemptionPolicy::Combined)
            }
            Trigger::LeaveSpace => matches!(self, PreemptionPolicy::LeaveSpace | PreemptionPolicy::Combined),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreemptionConfig {
    pub enabled: bool,
    pub policy: PreemptionPolicy,
    pub cost_model: PreemptionCostModel,
    /// Leave-space window τ in µs; defaults to the scenario's launch gap.
    pub leave_space_threshold_us: Option<f64>,
}

impl Default for PreemptionConfig {
    fn default() -> Self {
        PreemptionConfig {
            enabled: false,
            policy: PreemptionPolicy::OnArrival,
            cost_model: PreemptionCostModel::default(),
            leave_space_threshold_us: None,
        }
    }
}

/// An executing block that could be preempted.
#[derive(Debug, Clone, PartialEq)]
pub struct VictimCandidate {
    pub block: BlockId,
    pub sm_id: u32,
    pub task: usize,
    pub demand: ResourceVector,
    pub remaining_work: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreemptionPlan {
    pub victims: Vec<BlockId>,
    /// Resources released per affected SM once the save completes.
    pub freed: Vec<(u32, ResourceVector)>,
    pub save_latency: SimTime,
    pub trigger: Trigger,
}

/// What the requesting kernel needs: `count` blocks of `demand`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VictimQuery<'a> {
    pub demand: ResourceVector,
    pub count: u32,
    pub sms: &'a [SmState],
    /// Resources expected to free up before the plan matters (e.g. the
    /// running kernel of the protected task), per SM.
    pub extra_free: Option<&'a [ResourceVector]>,
}

impl VictimQuery<'_> {
    fn base_free(&self, sm: usize) -> ResourceVector {
        let mut f = self.sms[sm].free;
        if let Some(extra) = self.extra_free {
            f += extra[sm];
        }
        f
    }

    fn copies(&self, free: &ResourceVector) -> u64 {
        free.copies_of(&self.demand).map_or(u64::MAX / 4, u64::from)
    }
}

/// Blocks of the query's demand placeable if every eligible candidate were
/// evicted.
pub fn preemptible_capacity(
    q: &VictimQuery<'_>,
    candidates: &[VictimCandidate],
    protected: &dyn Fn(usize) -> bool,
) -> u64 {
    let mut free: Vec<ResourceVector> = (0..q.sms.len()).map(|i| q.base_free(i)).collect();
    for c in candidates.iter().filter(|c| !protected(c.task)) {
        free[c.sm_id as usize] += c.demand;
    }
    free.iter().map(|f| q.copies(f)).sum()
}

/// Greedy victim choice: eligible blocks in ascending remaining work until
/// the requested blocks become placeable, then victims that turned out to
/// be unnecessary are dropped again (largest remaining work first).
pub fn select_victims(
    q: &VictimQuery<'_>,
    candidates: &[VictimCandidate],
    protected: &dyn Fn(usize) -> bool,
    cost: &PreemptionCostModel,
    gpu: &GpuConfig,
    trigger: Trigger,
) -> Option<PreemptionPlan> {
    let need = u64::from(q.count);
    let mut free: Vec<ResourceVector> = (0..q.sms.len()).map(|i| q.base_free(i)).collect();
    let mut per_sm: Vec<u64> = free.iter().map(|f| q.copies(f)).collect();
    let mut total: u64 = per_sm.iter().sum();

    let mut eligible: Vec<&VictimCandidate> = candidates.iter().filter(|c| !protected(c.task)).collect();
    eligible.sort_by(|a, b| {
        a.remaining_work
            .total_cmp(&b.remaining_work)
            .then(a.sm_id.cmp(&b.sm_id))
            .then(a.block.cmp(&b.block))
    });

    let mut chosen: Vec<&VictimCandidate> = Vec::new();
    for c in eligible {
        if total >= need {
            break;
        }
        let sm = c.sm_id as usize;
        free[sm] += c.demand;
        let now = q.copies(&free[sm]);
        total = total - per_sm[sm] + now;
        per_sm[sm] = now;
        chosen.push(c);
    }
    if total < need {
        return None;
    }

    // Prune: drop victims whose absence keeps the request placeable.
    let mut i = chosen.len();
    while i > 0 {
        i -= 1;
        let c = chosen[i];
        let sm = c.sm_id as usize;
        let reduced = free[sm] - c.demand;
        let now = q.copies(&reduced);
        if total - per_sm[sm] + now >= need {
            free[sm] = reduced;
            total = total - per_sm[sm] + now;
            per_sm[sm] = now;
            chosen.remove(i);
        }
    }

    let mut freed: Vec<(u32, ResourceVector)> = Vec::new();
    for c in &chosen {
        match freed.iter_mut().find(|(sm, _)| *sm == c.sm_id) {
            Some((_, r)) => *r += c.demand,
            None => freed.push((c.sm_id, c.demand)),
        }
    }
    freed.sort_by_key(|(sm, _)| *sm);
    let save_latency = if chosen.is_empty() {
        SimTime::ZERO
    } else {
        SimTime::from_us(cost_per_sm(cost, gpu, freed.len() as u32))
    };
    let mut victims: Vec<BlockId> = chosen.iter().map(|c| c.block).collect();
    victims.sort_unstable();
    Some(PreemptionPlan {
        victims,
        freed,
        save_latency,
        trigger,
    })
}

/// Lookahead view of the protected task's next kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpcomingKernel {
    pub expected_arrival: SimTime,
    /// Start of the host-to-device transfer that precedes it, if any.
    pub h2d_transfer_start: Option<SimTime>,
    /// Whether its blocks would fit in the space left once the current
    /// kernel finishes, without preempting anything.
    pub fits_without_preemption: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurrentKernel {
    pub expected_completion: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanContext {
    pub policy: PreemptionPolicy,
    pub now: SimTime,
    /// Upper bound on the save latency of a plan.
    pub save_estimate: SimTime,
    /// Leave-space window τ.
    pub leave_space_threshold: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TriggerEvent {
    pub at: SimTime,
    pub trigger: Trigger,
}

/// Times at which the active hiding policies act for the upcoming kernel.
pub fn hiding_policy_events(
    upcoming: Option<&UpcomingKernel>,
    current: Option<&CurrentKernel>,
    ctx: &PlanContext,
) -> Vec<TriggerEvent> {
    let Some(up) = upcoming else {
        return Vec::new();
    };
    let mut out = Vec::new();
    if ctx.policy.uses(Trigger::TransferOverlap) {
        if let Some(ts) = up.h2d_transfer_start {
            out.push(TriggerEvent {
                at: ts.max(ctx.now),
                trigger: Trigger::TransferOverlap,
            });
        }
    }
    if let Some(cur) = current {
        if ctx.policy.uses(Trigger::PreDrain) && !up.fits_without_preemption {
            out.push(TriggerEvent {
                at: cur.expected_completion.saturating_sub(ctx.save_estimate).max(ctx.now),
                trigger: Trigger::PreDrain,
            });
        }
        if ctx.policy.uses(Trigger::LeaveSpace)
            && up.expected_arrival.saturating_sub(cur.expected_completion) <= ctx.leave_space_threshold
        {
            out.push(TriggerEvent {
                at: cur.expected_completion.max(ctx.now),
                trigger: Trigger::LeaveSpace,
            });
        }
    }
    out.sort_by_key(|e| e.at);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::empty_sms;

    fn gpu() -> GpuConfig {
        GpuConfig::default()
    }

    #[test]
    fn full_gpu_ledger() {
        let m = PreemptionCostModel::default();
        let total = m.constant_kb + 82.0 * (m.l1_shared_kb + m.register_file_kb) + m.l2_kb;
        assert_eq!(total, 37696.0);
        let c = cost_full_gpu(&m, &gpu());
        assert!((c - 38.0).abs() / 38.0 <= 0.10, "{c}");
    }

    #[test]
    fn zero_state_costs_nothing() {
        let m = PreemptionCostModel {
            constant_kb: 0.0,
            l1_shared_kb: 0.0,
            register_file_kb: 0.0,
            l2_kb: 0.0,
            ..Default::default()
        };
        assert_eq!(cost_full_gpu(&m, &gpu()), 0.0);
    }

    #[test]
    fn doubling_bandwidth_halves_cost() {
        let m = PreemptionCostModel::default();
        let fast = PreemptionCostModel {
            bandwidth_gbps: 2.0 * m.bandwidth_gbps,
            ..m.clone()
        };
        let (a, b) = (cost_full_gpu(&m, &gpu()), cost_full_gpu(&fast, &gpu()));
        assert!((a / 2.0 - b).abs() < 1e-12);
    }

    #[test]
    fn per_sm_costs() {
        let m = PreemptionCostModel::default();
        assert_eq!(m.per_sm_state_kb(), 448.0);
        let one = cost_per_sm(&m, &gpu(), 1);
        assert!((one - 37.0).abs() / 37.0 <= 0.10, "{one}");
        assert_eq!(cost_per_sm(&m, &gpu(), 82), one);

        let full = PreemptionCostModel {
            share_policy: SharePolicy::Full,
            ..m.clone()
        };
        let serial = cost_per_sm(&full, &gpu(), 82);
        assert!((serial - 82.0 * cost_per_sm(&full, &gpu(), 1)).abs() < 1e-9);

        let fixed = PreemptionCostModel::with_fixed_cost(73.0);
        assert_eq!(cost_per_sm(&fixed, &gpu(), 5), 73.0);
        assert_eq!(cost_full_gpu(&fixed, &gpu()), 73.0);
    }

    fn saturated_sms(n: u32) -> (Vec<SmState>, Vec<VictimCandidate>) {
        // six 256-thread, 32-register blocks per SM
        let demand = ResourceVector::new(256, 1, 8192, 0);
        let mut sms = empty_sms(n, gpu().sm_limits());
        let mut cands = Vec::new();
        let mut id = 0;
        for sm in &mut sms {
            for j in 0..6 {
                sm.allocate(demand);
                sm.resident.push(id);
                cands.push(VictimCandidate {
                    block: id,
                    sm_id: sm.sm_id,
                    task: 1,
                    demand,
                    remaining_work: 1000.0 + f64::from(j * 10 + sm.sm_id),
                });
                id += 1;
            }
        }
        (sms, cands)
    }

    #[test]
    fn no_victims_when_space_exists() {
        let sms = empty_sms(2, gpu().sm_limits());
        let q = VictimQuery {
            demand: ResourceVector::new(64, 1, 5120, 0),
            count: 4,
            sms: &sms,
            extra_free: None,
        };
        let plan = select_victims(&q, &[], &|_| false, &PreemptionCostModel::default(), &gpu(), Trigger::OnArrival)
            .unwrap();
        assert!(plan.victims.is_empty());
        assert_eq!(plan.save_latency, SimTime::ZERO);
    }

    #[test]
    fn one_training_block_makes_room_for_four_inference_blocks() {
        let (sms, cands) = saturated_sms(4);
        let q = VictimQuery {
            demand: ResourceVector::new(64, 1, 5120, 0),
            count: 4,
            sms: &sms,
            extra_free: None,
        };
        let plan = select_victims(&q, &cands, &|t| t == 0, &PreemptionCostModel::default(), &gpu(), Trigger::OnArrival)
            .unwrap();
        assert_eq!(plan.victims.len(), 1);
        // smallest remaining work: sm 0, first block
        assert_eq!(plan.victims, vec![0]);
        assert_eq!(plan.freed, vec![(0, ResourceVector::new(256, 1, 8192, 0))]);
        // registers after the swap: 5 * 8192 + 4 * 5120
        assert_eq!(5 * 8192 + 4 * 5120, 61440);
    }

    #[test]
    fn all_protected_yields_none() {
        let (sms, cands) = saturated_sms(2);
        let q = VictimQuery {
            demand: ResourceVector::new(64, 1, 64, 0),
            count: 1,
            sms: &sms,
            extra_free: None,
        };
        assert!(select_victims(&q, &cands, &|_| true, &PreemptionCostModel::default(), &gpu(), Trigger::OnArrival)
            .is_none());
    }

    #[test]
    fn prune_drops_unhelpful_victims() {
        // 1024-thread request: needs 4 victims on one SM; ascending order
        // interleaves SMs, so the greedy pass overshoots before pruning.
        let (sms, cands) = saturated_sms(2);
        let q = VictimQuery {
            demand: ResourceVector::new(1024, 1, 1024, 0),
            count: 1,
            sms: &sms,
            extra_free: None,
        };
        let plan = select_victims(&q, &cands, &|_| false, &PreemptionCostModel::default(), &gpu(), Trigger::OnArrival)
            .unwrap();
        assert_eq!(plan.victims.len(), 4);
        assert_eq!(plan.freed.len(), 1);
    }

    #[test]
    fn capacity_with_everything_evicted() {
        let (sms, cands) = saturated_sms(2);
        let q = VictimQuery {
            demand: ResourceVector::new(512, 1, 512, 0),
            count: 1,
            sms: &sms,
            extra_free: None,
        };
        assert_eq!(preemptible_capacity(&q, &cands, &|_| false), 6);
        assert_eq!(preemptible_capacity(&q, &cands, &|_| true), 0);
    }

    fn ctx(policy: PreemptionPolicy) -> PlanContext {
        PlanContext {
            policy,
            now: SimTime::from_us(100.0),
            save_estimate: SimTime::from_us(73.0),
            leave_space_threshold: SimTime::from_us(20.0),
        }
    }

    #[test]
    fn region_b_pre_drain_timing() {
        let cur = CurrentKernel {
            expected_completion: SimTime::from_us(237.0),
        };
        let up = UpcomingKernel {
            expected_arrival: SimTime::from_us(257.0),
            h2d_transfer_start: None,
            fits_without_preemption: false,
        };
        let ev = hiding_policy_events(Some(&up), Some(&cur), &ctx(PreemptionPolicy::PreDrain));
        assert_eq!(
            ev,
            vec![TriggerEvent {
                at: SimTime::from_us(164.0),
                trigger: Trigger::PreDrain
            }]
        );
    }

    #[test]
    fn region_a_leave_space() {
        let cur = CurrentKernel {
            expected_completion: SimTime::from_us(500.0),
        };
        let up = UpcomingKernel {
            expected_arrival: SimTime::from_us(520.0),
            h2d_transfer_start: None,
            fits_without_preemption: true,
        };
        let ev = hiding_policy_events(Some(&up), Some(&cur), &ctx(PreemptionPolicy::LeaveSpace));
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].trigger, Trigger::LeaveSpace);
        assert_eq!(ev[0].at, SimTime::from_us(500.0));

        let late = UpcomingKernel {
            expected_arrival: SimTime::from_us(600.0),
            ..up
        };
        assert!(hiding_policy_events(Some(&late), Some(&cur), &ctx(PreemptionPolicy::LeaveSpace)).is_empty());
    }

    #[test]
    fn transfer_overlap_and_none() {
        let up = UpcomingKernel {
            expected_arrival: SimTime::from_us(400.0),
            h2d_transfer_start: Some(SimTime::from_us(300.0)),
            fits_without_preemption: false,
        };
        let ev = hiding_policy_events(Some(&up), None, &ctx(PreemptionPolicy::TransferOverlap));
        assert_eq!(ev[0].at, SimTime::from_us(300.0));
        assert!(hiding_policy_events(None, None, &ctx(PreemptionPolicy::Combined)).is_empty());
        assert!(hiding_policy_events(Some(&up), None, &ctx(PreemptionPolicy::OnArrival)).is_empty());
    }
}
