//! Simulated device description, per-SM resource accounting and kernel
//! classification.

use std::fmt;
use std::ops::{Add, AddAssign, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::ValidationError;

/// Upper bound on threads in one block, fixed by the programming model.
pub const MAX_THREADS_PER_BLOCK: u32 = 1024;

/// Isolated runtime above which a kernel counts as long-running (µs).
pub const LONG_RUNNING_THRESHOLD_US: f64 = 1000.0;

/// The simulated GPU.
///
/// Defaults describe a GeForce RTX 3090: 82 SMs, 1536 threads, 16 blocks and
/// 64K 32-bit registers per SM. Memory sizes are decimal (1 KB = 1000 bytes,
/// 1 GB/s = 10^9 bytes/s).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpuConfig {
    pub num_sms: u32,
    pub threads_per_sm: u32,
    pub blocks_per_sm: u32,
    /// Count of 32-bit registers.
    pub registers_per_sm: u32,
    /// KB, used for block admission.
    pub shared_mem_per_sm_kb: u32,
    /// MB.
    pub global_mem_mb: u64,
    pub l2_cache_kb: u32,
    pub constant_mem_per_sm_kb: u32,
    /// Device memory bandwidth, GB/s.
    pub mem_bandwidth_gbps: f64,
    pub slice_length_us: f64,
    pub ctx_save_cost_us: f64,
    pub ctx_restore_cost_us: f64,
}

impl Default for GpuConfig {
    fn default() -> Self {
        Self::rtx3090()
    }
}

impl GpuConfig {
    pub fn rtx3090() -> Self {
        GpuConfig {
            num_sms: 82,
            threads_per_sm: 1536,
            blocks_per_sm: 16,
            registers_per_sm: 65536,
            shared_mem_per_sm_kb: 1024,
            global_mem_mb: 24 * 1024,
            l2_cache_kb: 6144,
            constant_mem_per_sm_kb: 64,
            mem_bandwidth_gbps: 936.0,
            slice_length_us: 2000.0,
            ctx_save_cost_us: 73.0,
            ctx_restore_cost_us: 73.0,
        }
    }

    /// Per-SM limits as a resource vector.
    pub fn sm_limits(&self) -> ResourceVector {
        ResourceVector {
            threads: self.threads_per_sm,
            blocks: self.blocks_per_sm,
            registers: self.registers_per_sm,
            shared_mem_kb: self.shared_mem_per_sm_kb,
        }
    }

    pub fn total_threads(&self) -> u64 {
        u64::from(self.num_sms) * u64::from(self.threads_per_sm)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        let counts = [
            ("num_sms", u64::from(self.num_sms)),
            ("threads_per_sm", u64::from(self.threads_per_sm)),
            ("blocks_per_sm", u64::from(self.blocks_per_sm)),
            ("registers_per_sm", u64::from(self.registers_per_sm)),
            ("shared_mem_per_sm_kb", u64::from(self.shared_mem_per_sm_kb)),
            ("global_mem_mb", self.global_mem_mb),
            ("l2_cache_kb", u64::from(self.l2_cache_kb)),
            ("constant_mem_per_sm_kb", u64::from(self.constant_mem_per_sm_kb)),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(ValidationError::new(format!("gpu.{field} must be positive")));
            }
        }
        let reals = [
            ("mem_bandwidth_gbps", self.mem_bandwidth_gbps),
            ("slice_length_us", self.slice_length_us),
            ("ctx_save_cost_us", self.ctx_save_cost_us),
            ("ctx_restore_cost_us", self.ctx_restore_cost_us),
        ];
        for (field, v) in reals {
            if !(v.is_finite() && v > 0.0) {
                return Err(ValidationError::new(format!("gpu.{field} must be positive")));
            }
        }
        Ok(())
    }
}

/// Occupancy along the four schedulable dimensions of an SM.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResourceVector {
    pub threads: u32,
    pub blocks: u32,
    pub registers: u32,
    pub shared_mem_kb: u32,
}

impl ResourceVector {
    pub const ZERO: ResourceVector = ResourceVector {
        threads: 0,
        blocks: 0,
        registers: 0,
        shared_mem_kb: 0,
    };

    pub fn new(threads: u32, blocks: u32, registers: u32, shared_mem_kb: u32) -> Self {
        ResourceVector {
            threads,
            blocks,
            registers,
            shared_mem_kb,
        }
    }

    /// Component-wise `self <= other`.
    pub fn fits_within(&self, other: &ResourceVector) -> bool {
        self.threads <= other.threads
            && self.blocks <= other.blocks
            && self.registers <= other.registers
            && self.shared_mem_kb <= other.shared_mem_kb
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::ZERO
    }

    pub fn get(&self, kind: ResourceKind) -> u32 {
        match kind {
            ResourceKind::Threads => self.threads,
            ResourceKind::Blocks => self.blocks,
            ResourceKind::Registers => self.registers,
            ResourceKind::SharedMem => self.shared_mem_kb,
        }
    }

    pub fn scaled(&self, n: u32) -> ResourceVector {
        ResourceVector {
            threads: self.threads * n,
            blocks: self.blocks * n,
            registers: self.registers * n,
            shared_mem_kb: self.shared_mem_kb * n,
        }
    }

    /// How many copies of `demand` fit in `self`. `None` means unbounded
    /// (zero demand).
    pub fn copies_of(&self, demand: &ResourceVector) -> Option<u32> {
        ResourceKind::ALL
            .iter()
            .filter(|k| demand.get(**k) > 0)
            .map(|k| self.get(*k) / demand.get(*k))
            .min()
    }

    pub fn checked_sub(&self, rhs: &ResourceVector) -> Option<ResourceVector> {
        Some(ResourceVector {
            threads: self.threads.checked_sub(rhs.threads)?,
            blocks: self.blocks.checked_sub(rhs.blocks)?,
            registers: self.registers.checked_sub(rhs.registers)?,
            shared_mem_kb: self.shared_mem_kb.checked_sub(rhs.shared_mem_kb)?,
        })
    }
}

impl Add for ResourceVector {
    type Output = ResourceVector;
    fn add(self, rhs: ResourceVector) -> ResourceVector {
        ResourceVector {
            threads: self.threads + rhs.threads,
            blocks: self.blocks + rhs.blocks,
            registers: self.registers + rhs.registers,
            shared_mem_kb: self.shared_mem_kb + rhs.shared_mem_kb,
        }
    }
}

impl AddAssign for ResourceVector {
    fn add_assign(&mut self, rhs: ResourceVector) {
        *self = *self + rhs;
    }
}

impl Sub for ResourceVector {
    type Output = ResourceVector;
    /// Panics on underflow: callers only subtract what they previously added.
    fn sub(self, rhs: ResourceVector) -> ResourceVector {
        self.checked_sub(&rhs)
            .unwrap_or_else(|| panic!("resource underflow: {self:?} - {rhs:?}"))
    }
}

impl SubAssign for ResourceVector {
    fn sub_assign(&mut self, rhs: ResourceVector) {
        *self = *self - rhs;
    }
}

/// One of the four schedulable SM resources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceKind {
    Threads,
    Blocks,
    Registers,
    SharedMem,
}

impl ResourceKind {
    /// Also the tie-break order for [`limiting_resource`].
    pub const ALL: [ResourceKind; 4] = [
        ResourceKind::Threads,
        ResourceKind::Blocks,
        ResourceKind::Registers,
        ResourceKind::SharedMem,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ResourceKind::Threads => "threads",
            ResourceKind::Blocks => "blocks",
            ResourceKind::Registers => "registers",
            ResourceKind::SharedMem => "shared_mem",
        }
    }
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Static shape of a kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelDescriptor {
    pub name: String,
    pub grid_blocks: u32,
    pub threads_per_block: u32,
    pub regs_per_thread: u32,
    #[serde(rename = "shared_mem_per_block_kb")]
    pub shared_mem_per_block_kb: u32,
    #[serde(rename = "isolated_duration_us")]
    pub isolated_duration_us: f64,
}

impl KernelDescriptor {
    pub fn new(
        name: impl Into<String>,
        grid_blocks: u32,
        threads_per_block: u32,
        regs_per_thread: u32,
        shared_mem_per_block_kb: u32,
        isolated_duration_us: f64,
    ) -> Self {
        KernelDescriptor {
            name: name.into(),
            grid_blocks,
            threads_per_block,
            regs_per_thread,
            shared_mem_per_block_kb,
            isolated_duration_us,
        }
    }

    /// Checks the descriptor against its own invariants and against one SM of `gpu`.
    pub fn validate(&self, gpu: &GpuConfig) -> Result<(), ValidationError> {
        let fail = |msg: String| Err(ValidationError::new(format!("kernel '{}': {msg}", self.name)));
        if self.grid_blocks == 0 {
            return fail("grid_blocks must be at least 1".into());
        }
        if self.threads_per_block == 0 || self.threads_per_block > MAX_THREADS_PER_BLOCK {
            return fail(format!(
                "threads_per_block {} outside 1..={MAX_THREADS_PER_BLOCK}",
                self.threads_per_block
            ));
        }
        if !(self.isolated_duration_us.is_finite() && self.isolated_duration_us > 0.0) {
            return fail("isolated_duration_us must be positive".into());
        }
        let Some(regs) = self.threads_per_block.checked_mul(self.regs_per_thread) else {
            return fail("register demand overflows".into());
        };
        let demand = ResourceVector::new(self.threads_per_block, 1, regs, self.shared_mem_per_block_kb);
        if !demand.fits_within(&gpu.sm_limits()) {
            return fail(format!("per-block demand {demand:?} exceeds one SM"));
        }
        Ok(())
    }
}

/// Resources one block of `k` holds while resident.
pub fn block_demand(k: &KernelDescriptor) -> ResourceVector {
    ResourceVector {
        threads: k.threads_per_block,
        blocks: 1,
        registers: k.threads_per_block * k.regs_per_thread,
        shared_mem_kb: k.shared_mem_per_block_kb,
    }
}

fn per_dimension_floors(k: &KernelDescriptor, g: &GpuConfig) -> [(ResourceKind, u32); 4] {
    let demand = block_demand(k);
    let limits = g.sm_limits();
    ResourceKind::ALL.map(|kind| {
        let d = demand.get(kind);
        let floor = limits.get(kind).checked_div(d).unwrap_or(u32::MAX);
        (kind, floor)
    })
}

/// Blocks of `k` that one otherwise empty SM can hold.
pub fn max_resident_blocks_per_sm(k: &KernelDescriptor, g: &GpuConfig) -> u32 {
    limiting(k, g).1
}

/// First resource exhausted when packing blocks of `k` onto an SM.
pub fn limiting_resource(k: &KernelDescriptor, g: &GpuConfig) -> ResourceKind {
    limiting(k, g).0
}

fn limiting(k: &KernelDescriptor, g: &GpuConfig) -> (ResourceKind, u32) {
    // min_by_key keeps the first minimum, which gives the fixed tie-break order.
    per_dimension_floors(k, g)
        .into_iter()
        .min_by_key(|(_, floor)| *floor)
        .expect("four dimensions")
}

/// Blocks of `k` resident across the whole GPU when it runs alone.
pub fn gpu_capacity(k: &KernelDescriptor, g: &GpuConfig) -> u64 {
    u64::from(g.num_sms) * u64::from(max_resident_blocks_per_sm(k, g))
}

/// Number of block waves `k` needs in isolation.
pub fn waves(k: &KernelDescriptor, g: &GpuConfig) -> u64 {
    u64::from(k.grid_blocks).div_ceil(gpu_capacity(k, g))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelClass {
    pub large: bool,
    pub long_running: bool,
}

pub fn classify_kernel(k: &KernelDescriptor, g: &GpuConfig) -> KernelClass {
    KernelClass {
        large: u64::from(k.grid_blocks) > gpu_capacity(k, g),
        long_running: k.isolated_duration_us > LONG_RUNNING_THRESHOLD_US,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k(grid: u32, threads: u32, regs: u32, smem: u32, dur: f64) -> KernelDescriptor {
        KernelDescriptor::new("k", grid, threads, regs, smem, dur)
    }

    #[test]
    fn block_demand_examples() {
        assert_eq!(block_demand(&k(1, 256, 32, 0, 1.0)), ResourceVector::new(256, 1, 8192, 0));
        assert_eq!(block_demand(&k(1, 64, 80, 0, 1.0)), ResourceVector::new(64, 1, 5120, 0));
        assert_eq!(block_demand(&k(1, 1, 1, 0, 1.0)), ResourceVector::new(1, 1, 1, 0));
    }

    #[test]
    fn resident_blocks_and_limiting_resource() {
        let g = GpuConfig::default();
        let resnet_train = k(200704, 256, 32, 0, 5000.0);
        assert_eq!(max_resident_blocks_per_sm(&resnet_train, &g), 6);
        assert_eq!(limiting_resource(&resnet_train, &g), ResourceKind::Threads);
        assert_eq!(gpu_capacity(&resnet_train, &g), 492);

        // floors: threads 24, blocks 16, registers 12, shared unbounded
        let sgemm = k(32, 64, 80, 0, 10.0);
        assert_eq!(max_resident_blocks_per_sm(&sgemm, &g), 12);
        assert_eq!(limiting_resource(&sgemm, &g), ResourceKind::Registers);

        let unit = k(1, 1, 1, 0, 1.0);
        assert_eq!(max_resident_blocks_per_sm(&unit, &g), 16);
        assert_eq!(limiting_resource(&unit, &g), ResourceKind::Blocks);
    }

    #[test]
    fn tie_break_prefers_threads_over_blocks() {
        // 96 threads: 1536/96 = 16 = blocks_per_sm
        let g = GpuConfig::default();
        assert_eq!(limiting_resource(&k(1, 96, 1, 0, 1.0), &g), ResourceKind::Threads);
    }

    #[test]
    fn classification_examples() {
        let g = GpuConfig::default();
        assert!(classify_kernel(&k(200704, 256, 32, 0, 10.0), &g).large);
        let c = classify_kernel(&k(32, 64, 32, 0, 137.0), &g);
        assert!(!c.large && !c.long_running);
        assert!(!classify_kernel(&k(1, 1, 1, 0, 1000.0), &g).long_running);
        assert!(classify_kernel(&k(1, 1, 1, 0, 1000.001), &g).long_running);
        // exactly at capacity is not large
        assert!(!classify_kernel(&k(492, 256, 32, 0, 1.0), &g).large);
        assert!(classify_kernel(&k(493, 256, 32, 0, 1.0), &g).large);
    }

    #[test]
    fn descriptor_validation() {
        let g = GpuConfig::default();
        assert!(k(1, 2048, 1, 0, 1.0).validate(&g).is_err());
        assert!(k(0, 32, 1, 0, 1.0).validate(&g).is_err());
        assert!(k(1, 32, 1, 0, 0.0).validate(&g).is_err());
        assert!(k(1, 1024, 65, 0, 1.0).validate(&g).is_err());
        assert!(k(1, 1024, 64, 1024, 1.0).validate(&g).is_ok());
        assert!(k(1, 1024, 64, 1025, 1.0).validate(&g).is_err());
    }

    #[test]
    fn default_gpu_is_valid() {
        GpuConfig::default().validate().unwrap();
        let g = GpuConfig {
            num_sms: 0,
            ..GpuConfig::default()
        };
        assert!(g.validate().is_err());
    }

    #[test]
    fn copies_of_ignores_zero_dimensions() {
        let free = ResourceVector::new(1536, 16, 65536, 0);
        assert_eq!(free.copies_of(&ResourceVector::new(256, 1, 8192, 0)), Some(6));
        assert_eq!(free.copies_of(&ResourceVector::ZERO), None);
    }
}
