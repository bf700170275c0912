//! Collective communication: alpha-beta ring formulas, two-tier fabric
//! mapping and phase-aware overlap.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::calibration::{FfnSharding, ShardingPolicy};
use crate::error::invalid;
use crate::specs::{HardwareSpec, KvMode, ModelSpec, ParallelismPlan};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct PhaseOverlap {
    pub attention: f64,
    pub projection: f64,
    pub ffn: f64,
}

impl PhaseOverlap {
    pub fn get(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Attention => self.attention,
            Phase::Projection => self.projection,
            Phase::Ffn => self.ffn,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct CommConfig {
    /// Startup latency per ring step inside an island, seconds.
    pub alpha_intra: f64,
    /// Startup latency per ring step across islands, seconds.
    pub alpha_inter: f64,
    /// Fraction of each phase's window that can hide communication.
    pub overlap: PhaseOverlap,
    /// Share of a context-parallel ring that is always exposed.
    pub cp_ring_tail_fraction: f64,
    /// Bytes per activation element on the wire.
    pub activation_dtype_bytes: u32,
}

impl Default for CommConfig {
    fn default() -> Self {
        CommConfig {
            alpha_intra: 1e-6,
            alpha_inter: 3e-6,
            overlap: PhaseOverlap { attention: 0.8, projection: 0.8, ffn: 0.5 },
            cp_ring_tail_fraction: 0.25,
            activation_dtype_bytes: 2,
        }
    }
}

impl CommConfig {
    /// Defaults with the intra-island alpha taken from `hw` and the
    /// inter-island alpha three times larger.
    pub fn from_hardware(hw: &HardwareSpec) -> Self {
        CommConfig {
            alpha_intra: hw.collective_startup_latency,
            alpha_inter: 3.0 * hw.collective_startup_latency,
            ..CommConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_intra >= 0.0 && self.alpha_inter >= 0.0) {
            return Err(invalid("comm.alpha", "startup latencies must be non-negative"));
        }
        let fractions = [self.overlap.attention, self.overlap.projection, self.overlap.ffn, self.cp_ring_tail_fraction];
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(invalid("comm.overlap", "overlap and tail fractions must lie in [0, 1]"));
        }
        if self.activation_dtype_bytes == 0 {
            return Err(invalid("comm.activation_dtype_bytes", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum Fabric {
    Intra,
    Inter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Attention,
    Projection,
    Ffn,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Attention, Phase::Projection, Phase::Ffn];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum CollectiveFamily {
    TpAllreduce,
    EpAllToAll,
    KvpCollective,
    CpRing,
    LayoutTransition,
}

/// Which point of the layer an event belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum Step {
    AttentionOutput,
    FfnOutput,
    Dispatch,
    Combine,
    PartialReduce,
    QueryRing,
    ToFfn,
    ToAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct CollectiveEvent {
    pub family: CollectiveFamily,
    pub step: Step,
    pub bytes_per_rank: f64,
    pub group_size: u32,
    /// Width of the contiguous rank range the group touches.
    pub span: u32,
    pub fabric: Fabric,
    pub phase: Phase,
}

/// Per-layer collectives of one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct CollectiveSchedule {
    /// Layers held by one stage; every per-layer event repeats this often per step.
    pub layers: f64,
    pub per_layer: Vec<CollectiveEvent>,
}

impl CollectiveSchedule {
    pub fn is_empty(&self) -> bool {
        self.per_layer.is_empty()
    }

    pub fn count(&self, family: CollectiveFamily) -> usize {
        self.per_layer.iter().filter(|e| e.family == family).count()
    }
}

/// `2(p−1)·α + 2n(p−1)/(p·β)`; zero for a singleton group.
pub fn ring_allreduce_time(p: u32, n: f64, alpha: f64, beta: f64) -> f64 {
    if p <= 1 {
        return 0.0;
    }
    let p1 = (p - 1) as f64;
    2.0 * p1 * alpha + 2.0 * n * p1 / (p as f64 * beta)
}

/// `(p−1)·α + n(p−1)/(p·β)`; zero for a singleton group.
pub fn all_to_all_time(p: u32, n_per_rank: f64, alpha: f64, beta: f64) -> f64 {
    if p <= 1 {
        return 0.0;
    }
    let p1 = (p - 1) as f64;
    p1 * alpha + n_per_rank * p1 / (p as f64 * beta)
}

/// Ring pass of a block around `p` ranks: `(p−1)·(α + n/β)`.
pub fn ring_pass_time(p: u32, n_block: f64, alpha: f64, beta: f64) -> f64 {
    if p <= 1 {
        return 0.0;
    }
    (p - 1) as f64 * (alpha + n_block / beta)
}

/// Intra-island iff the group fits within one island.
pub fn map_fabric(group_size: u32, island_capacity: u32) -> Fabric {
    if group_size <= island_capacity {
        Fabric::Intra
    } else {
        Fabric::Inter
    }
}

fn link(fabric: Fabric, cfg: &CommConfig, hw: &HardwareSpec) -> (f64, f64) {
    match fabric {
        Fabric::Intra => (cfg.alpha_intra, hw.intra_node_bw),
        Fabric::Inter => (cfg.alpha_inter, hw.inter_node_bw),
    }
}

/// Cost of one occurrence of `event`.
pub fn event_cost(event: &CollectiveEvent, cfg: &CommConfig, hw: &HardwareSpec) -> f64 {
    let (alpha, beta) = link(event.fabric, cfg, hw);
    let (p, n) = (event.group_size, event.bytes_per_rank);
    match event.family {
        CollectiveFamily::TpAllreduce => ring_allreduce_time(p, n, alpha, beta),
        CollectiveFamily::EpAllToAll | CollectiveFamily::KvpCollective | CollectiveFamily::LayoutTransition => {
            all_to_all_time(p, n, alpha, beta)
        }
        CollectiveFamily::CpRing => ring_pass_time(p, n, alpha, beta),
    }
}

/// FFN-phase tensor-parallel group width for `model` under `plan`.
pub fn ffn_tp_group(model: &ModelSpec, plan: &ParallelismPlan, policy: &ShardingPolicy) -> u32 {
    match policy.ffn {
        FfnSharding::EpOnly => plan.tp,
        FfnSharding::Pooled if model.is_dense() => plan.pool(),
        FfnSharding::Pooled => (crate::memory::expert_pool_width(plan) / plan.ep).max(1),
    }
}

/// Per-layer collectives for a replica decoding `batch` sequences.
pub fn build_collective_schedule(
    model: &ModelSpec,
    plan: &ParallelismPlan,
    batch: f64,
    hw: &HardwareSpec,
    cfg: &CommConfig,
    policy: &ShardingPolicy,
) -> CollectiveSchedule {
    let act = cfg.activation_dtype_bytes as f64;
    let island = hw.island_capacity;
    let token_bytes = batch * model.d_model as f64 * act;
    let mut events = Vec::new();
    let mut push = |family, step, bytes_per_rank: f64, group_size: u32, span: u32, phase| {
        if group_size > 1 {
            events.push(CollectiveEvent { family, step, bytes_per_rank, group_size, span, fabric: map_fabric(span, island), phase });
        }
    };

    let pool = plan.pool();
    let query_bytes = batch * model.num_heads as f64 * model.head_dim as f64 * act / plan.tp as f64;
    match plan.kv_mode {
        KvMode::None => {}
        KvMode::Kvp => push(CollectiveFamily::KvpCollective, Step::PartialReduce, query_bytes, plan.kv_degree, pool, Phase::Attention),
        KvMode::Cp => push(CollectiveFamily::CpRing, Step::QueryRing, query_bytes, plan.kv_degree, pool, Phase::Attention),
    }
    push(CollectiveFamily::TpAllreduce, Step::AttentionOutput, token_bytes, plan.tp, plan.tp, Phase::Projection);
    if plan.kv_mode != KvMode::None {
        let per_rank = token_bytes / plan.kv_degree as f64;
        push(CollectiveFamily::LayoutTransition, Step::ToFfn, per_rank, plan.kv_degree, pool, Phase::Projection);
        push(CollectiveFamily::LayoutTransition, Step::ToAttention, per_rank, plan.kv_degree, pool, Phase::Projection);
    }
    if !model.is_dense() && plan.ep > 1 {
        let span = match policy.ffn {
            FfnSharding::EpOnly => plan.ep,
            FfnSharding::Pooled => crate::memory::expert_pool_width(plan),
        };
        let per_rank = token_bytes * model.top_k as f64 / plan.ep as f64;
        push(CollectiveFamily::EpAllToAll, Step::Dispatch, per_rank, plan.ep, span, Phase::Ffn);
        push(CollectiveFamily::EpAllToAll, Step::Combine, per_rank, plan.ep, span, Phase::Ffn);
    }
    let ffn_tp = ffn_tp_group(model, plan, policy);
    push(CollectiveFamily::TpAllreduce, Step::FfnOutput, token_bytes, ffn_tp, ffn_tp, Phase::Ffn);

    CollectiveSchedule { layers: model.num_layers as f64 / plan.pp as f64, per_layer: events }
}

/// Per-phase seconds; used both for overlap windows and exposed time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct PhaseTimes {
    pub attention: f64,
    pub projection: f64,
    pub ffn: f64,
}

impl PhaseTimes {
    pub fn get(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Attention => self.attention,
            Phase::Projection => self.projection,
            Phase::Ffn => self.ffn,
        }
    }

    fn get_mut(&mut self, phase: Phase) -> &mut f64 {
        match phase {
            Phase::Attention => &mut self.attention,
            Phase::Projection => &mut self.projection,
            Phase::Ffn => &mut self.ffn,
        }
    }

    pub fn total(&self) -> f64 {
        self.attention + self.projection + self.ffn
    }
}

/// Scheduled seconds per step, by collective family.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct FamilyTimes {
    pub tp_allreduce: f64,
    pub ep_all_to_all: f64,
    pub kvp_collective: f64,
    pub cp_ring: f64,
    pub layout_transition: f64,
}

impl FamilyTimes {
    fn add(&mut self, family: CollectiveFamily, t: f64) {
        let slot = match family {
            CollectiveFamily::TpAllreduce => &mut self.tp_allreduce,
            CollectiveFamily::EpAllToAll => &mut self.ep_all_to_all,
            CollectiveFamily::KvpCollective => &mut self.kvp_collective,
            CollectiveFamily::CpRing => &mut self.cp_ring,
            CollectiveFamily::LayoutTransition => &mut self.layout_transition,
        };
        *slot += t;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct CommBreakdown {
    /// All scheduled communication per step, seconds.
    pub total_scheduled: f64,
    /// Communication not hidden under the phase windows, seconds.
    pub exposed: f64,
    pub exposed_by_phase: PhaseTimes,
    pub scheduled_by_family: FamilyTimes,
}

/// Exposed seconds per step given per-step phase `windows`.
///
/// Per phase: `max(0, Σ cost − overlap · window)`, where the τ tail of any
/// context-parallel ring is charged before windowing.
pub fn exposed_comm(schedule: &CollectiveSchedule, windows: &PhaseTimes, cfg: &CommConfig, hw: &HardwareSpec) -> CommBreakdown {
    let mut hideable = PhaseTimes::default();
    let mut tail = PhaseTimes::default();
    let mut families = FamilyTimes::default();
    for event in &schedule.per_layer {
        let cost = schedule.layers * event_cost(event, cfg, hw);
        families.add(event.family, cost);
        if event.family == CollectiveFamily::CpRing {
            *tail.get_mut(event.phase) += cfg.cp_ring_tail_fraction * cost;
            *hideable.get_mut(event.phase) += (1.0 - cfg.cp_ring_tail_fraction) * cost;
        } else {
            *hideable.get_mut(event.phase) += cost;
        }
    }
    let mut exposed = PhaseTimes::default();
    for phase in Phase::ALL {
        let window = cfg.overlap.get(phase) * windows.get(phase);
        *exposed.get_mut(phase) = tail.get(phase) + (hideable.get(phase) - window).max(0.0);
    }
    CommBreakdown {
        total_scheduled: hideable.total() + tail.total(),
        exposed: exposed.total(),
        exposed_by_phase: exposed,
        scheduled_by_family: families,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specs::{FfnKind, KvLayout};

    fn model(e: u32, k: u32) -> ModelSpec {
        ModelSpec {
            name: "m".into(),
            num_layers: 4,
            d_model: 1024,
            num_heads: 8,
            head_dim: 128,
            ffn_kind: if e == 1 { FfnKind::Dense } else { FfnKind::Moe },
            num_experts: e,
            top_k: k,
            ffn_hidden_dim: 512,
            ffn_projections: 3,
            ffn_params_per_layer: e as u64 * 3 * 1024 * 512,
            attn_params_per_layer: 4 * 1024 * 1024,
            embedding_params: 0,
            total_params: 2,
            active_params: if e == 1 { 2 } else { 1 },
            kv_layout: KvLayout::gqa(2, 128),
            weight_dtype_bytes: 1,
            kv_dtype_bytes: 2,
        }
    }

    fn plan(tp: u32, ep: u32, kv_mode: KvMode, kv: u32) -> ParallelismPlan {
        ParallelismPlan { tp, ep, pp: 1, kv_mode, kv_degree: kv, dp: 1 }
    }

    fn event(cost_family: CollectiveFamily, phase: Phase) -> CollectiveEvent {
        CollectiveEvent { family: cost_family, step: Step::AttentionOutput, bytes_per_rank: 0.0, group_size: 2, span: 2, fabric: Fabric::Intra, phase }
    }

    #[test]
    fn ring_allreduce_examples() {
        assert_eq!(ring_allreduce_time(1, 1e9, 1e-6, 1e9), 0.0);
        let t = ring_allreduce_time(2, 1e6, 0.0, 900e9);
        assert!((t - 1e6 / 900e9).abs() < 1e-18);
        assert!((t - 1.11e-6).abs() < 0.01e-6);
        let a = ring_allreduce_time(4, 1e6, 1e-6, 1e9);
        let b = ring_allreduce_time(4, 2e6, 1e-6, 1e9);
        let alpha_term = 6e-6;
        assert!(((b - alpha_term) - 2.0 * (a - alpha_term)).abs() < 1e-15);
    }

    #[test]
    fn all_to_all_examples() {
        assert_eq!(all_to_all_time(1, 1e9, 1e-6, 1e9), 0.0);
        let r = all_to_all_time(4, 1e6, 0.0, 1e9) / all_to_all_time(2, 1e6, 0.0, 1e9);
        assert!((r - 1.5).abs() < 1e-12);
    }

    #[test]
    fn fabric_boundary() {
        assert_eq!(map_fabric(8, 8), Fabric::Intra);
        assert_eq!(map_fabric(9, 8), Fabric::Inter);
        assert_eq!(map_fabric(16, 8), Fabric::Inter);
        assert_eq!(map_fabric(1, 8), Fabric::Intra);
    }

    #[test]
    fn unsharded_dense_has_empty_schedule() {
        let s = build_collective_schedule(&model(1, 1), &ParallelismPlan::SINGLE, 64.0, &HardwareSpec::reference(), &CommConfig::default(), &ShardingPolicy::default());
        assert!(s.is_empty());
    }

    #[test]
    fn moe_ep_has_dispatch_and_combine() {
        let s = build_collective_schedule(&model(16, 2), &plan(4, 4, KvMode::None, 1), 64.0, &HardwareSpec::reference(), &CommConfig::default(), &ShardingPolicy::default());
        assert_eq!(s.count(CollectiveFamily::EpAllToAll), 2);
        let ev = s.per_layer.iter().find(|e| e.step == Step::Dispatch).unwrap();
        assert_eq!(ev.bytes_per_rank, 64.0 * 2.0 * 1024.0 * 2.0 / 4.0);
        assert_eq!(ev.phase, Phase::Ffn);
        assert_eq!(s.count(CollectiveFamily::TpAllreduce), 2);
    }

    #[test]
    fn cp_mode_emits_ring_and_transitions() {
        let s = build_collective_schedule(&model(16, 2), &plan(8, 1, KvMode::Cp, 2), 8.0, &HardwareSpec::reference(), &CommConfig::default(), &ShardingPolicy::default());
        let ring = s.per_layer.iter().find(|e| e.family == CollectiveFamily::CpRing).unwrap();
        assert_eq!(ring.phase, Phase::Attention);
        assert_eq!(ring.fabric, Fabric::Inter);
        assert_eq!(s.count(CollectiveFamily::LayoutTransition), 2);
    }

    #[test]
    fn pooled_moe_ffn_group_is_pool_over_ep() {
        let policy = ShardingPolicy { ffn: FfnSharding::Pooled, ..ShardingPolicy::default() };
        assert_eq!(ffn_tp_group(&model(16, 2), &plan(8, 4, KvMode::Kvp, 4), &policy), 8);
        assert_eq!(ffn_tp_group(&model(16, 2), &plan(2, 8, KvMode::Kvp, 4), &policy), 1);
        assert_eq!(ffn_tp_group(&model(1, 1), &plan(8, 1, KvMode::Kvp, 4), &policy), 32);
    }

    #[test]
    fn exposure_examples() {
        let hw = HardwareSpec { intra_node_bw: 1.0, ..HardwareSpec::reference() };
        let cfg_full = CommConfig { alpha_intra: 10e-6, overlap: PhaseOverlap { attention: 1.0, projection: 1.0, ffn: 1.0 }, ..CommConfig::default() };
        // One all-reduce over two ranks with zero bytes costs 2·α = 20 µs.
        let sched = CollectiveSchedule { layers: 1.0, per_layer: alloc::vec![event(CollectiveFamily::TpAllreduce, Phase::Projection)] };
        let cost = 20e-6;
        let w = |t| PhaseTimes { attention: 0.0, projection: t, ffn: 0.0 };
        assert_eq!(exposed_comm(&sched, &w(cost), &cfg_full, &hw).exposed, 0.0);
        let cfg_none = CommConfig { overlap: PhaseOverlap { attention: 0.0, projection: 0.0, ffn: 0.0 }, ..cfg_full };
        assert_eq!(exposed_comm(&sched, &w(1.0), &cfg_none, &hw).exposed, cost);
        let r = exposed_comm(&sched, &w(8e-6), &cfg_full, &hw);
        assert!((r.exposed - 12e-6).abs() < 1e-15);
    }

    #[test]
    fn cp_tail_is_always_exposed() {
        let hw = HardwareSpec::reference();
        let cfg = CommConfig { overlap: PhaseOverlap { attention: 1.0, projection: 1.0, ffn: 1.0 }, cp_ring_tail_fraction: 0.25, ..CommConfig::default() };
        let sched = CollectiveSchedule { layers: 3.0, per_layer: alloc::vec![event(CollectiveFamily::CpRing, Phase::Attention)] };
        let r = exposed_comm(&sched, &PhaseTimes { attention: 1.0, projection: 0.0, ffn: 0.0 }, &cfg, &hw);
        assert!((r.exposed - 0.25 * r.total_scheduled).abs() < 1e-18);
        assert!(r.exposed > 0.0);
    }
}
