//! Domain types: models, hardware, clusters, workloads and parallelism plans.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    Dense,
    Moe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum KvKind {
    Full,
    Gqa,
    Mqa,
    Mla,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct KvLayout {
    pub kind: KvKind,
    /// KV heads for full/gqa/mqa; ignored for mla.
    #[serde(default)]
    pub num_kv_heads: u32,
    #[serde(default)]
    pub kv_head_dim: u32,
    #[serde(default)]
    pub mla_latent_dim: u32,
    #[serde(default)]
    pub mla_rope_dim: u32,
}

impl KvLayout {
    pub fn gqa(num_kv_heads: u32, kv_head_dim: u32) -> Self {
        let kind = if num_kv_heads == 1 { KvKind::Mqa } else { KvKind::Gqa };
        KvLayout { kind, num_kv_heads, kv_head_dim, mla_latent_dim: 0, mla_rope_dim: 0 }
    }

    pub fn full(num_heads: u32, head_dim: u32) -> Self {
        KvLayout { kind: KvKind::Full, num_kv_heads: num_heads, kv_head_dim: head_dim, mla_latent_dim: 0, mla_rope_dim: 0 }
    }

    pub fn mla(latent_dim: u32, rope_dim: u32) -> Self {
        KvLayout { kind: KvKind::Mla, num_kv_heads: 0, kv_head_dim: 0, mla_latent_dim: latent_dim, mla_rope_dim: rope_dim }
    }

    /// Elements cached per token per layer.
    pub fn elements_per_token_per_layer(&self) -> u64 {
        match self.kind {
            KvKind::Mla => self.mla_latent_dim as u64 + self.mla_rope_dim as u64,
            _ => 2 * self.num_kv_heads as u64 * self.kv_head_dim as u64,
        }
    }

    fn validate(&self, num_heads: u32) -> Result<()> {
        match self.kind {
            KvKind::Mla => {
                if self.mla_latent_dim == 0 {
                    return Err(invalid("kv_layout.mla_latent_dim", "mla layout needs a positive latent dimension"));
                }
            }
            kind => {
                if self.num_kv_heads == 0 || self.kv_head_dim == 0 {
                    return Err(invalid("kv_layout", "num_kv_heads and kv_head_dim must be positive"));
                }
                if kind == KvKind::Mqa && self.num_kv_heads != 1 {
                    return Err(invalid("kv_layout.num_kv_heads", "mqa requires exactly one KV head"));
                }
                if kind == KvKind::Full && self.num_kv_heads != num_heads {
                    return Err(invalid("kv_layout.num_kv_heads", "full attention caches one KV head per query head"));
                }
                if kind == KvKind::Gqa && !num_heads.is_multiple_of(self.num_kv_heads) {
                    return Err(invalid("kv_layout.num_kv_heads", "gqa KV heads must divide the query heads"));
                }
            }
        }
        Ok(())
    }
}

/// Architecture description. Dense models are the degenerate MoE with
/// `num_experts = top_k = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub num_layers: u32,
    pub d_model: u32,
    pub num_heads: u32,
    pub head_dim: u32,
    pub ffn_kind: FfnKind,
    pub num_experts: u32,
    pub top_k: u32,
    /// Intermediate dimension of one expert (or of the dense FFN).
    pub ffn_hidden_dim: u32,
    /// Weight matrices per FFN: 3 for gated (SwiGLU/GeGLU), 2 otherwise.
    pub ffn_projections: u32,
    /// FFN parameters per layer, summed over all experts.
    pub ffn_params_per_layer: u64,
    /// Attention and output-projection parameters per layer.
    pub attn_params_per_layer: u64,
    /// Embedding, unembedding and final-norm parameters.
    pub embedding_params: u64,
    pub total_params: u64,
    pub active_params: u64,
    pub kv_layout: KvLayout,
    pub weight_dtype_bytes: u32,
    pub kv_dtype_bytes: u32,
}

/// Relative tolerance for the parameter bookkeeping checks that produce warnings.
const TOTAL_PARAMS_TOL: f64 = 0.01;
const EXPERT_SHAPE_TOL: f64 = 0.10;
/// Loose because shared experts and leading dense layers are folded into the
/// per-layer average rather than modelled separately.
const ACTIVE_PARAMS_TOL: f64 = 0.15;

impl ModelSpec {
    pub fn is_dense(&self) -> bool {
        self.ffn_kind == FfnKind::Dense
    }

    pub fn sparsity(&self) -> f64 {
        self.top_k as f64 / self.num_experts as f64
    }

    pub fn ffn_weight_bytes_per_layer(&self) -> f64 {
        self.ffn_params_per_layer as f64 * self.weight_dtype_bytes as f64
    }

    pub fn attn_weight_bytes_per_layer(&self) -> f64 {
        self.attn_params_per_layer as f64 * self.weight_dtype_bytes as f64
    }

    pub fn embedding_weight_bytes(&self) -> f64 {
        self.embedding_params as f64 * self.weight_dtype_bytes as f64
    }

    /// Parameter total implied by the per-layer breakdown.
    pub fn implied_total_params(&self) -> f64 {
        self.num_layers as f64 * (self.attn_params_per_layer as f64 + self.ffn_params_per_layer as f64)
            + self.embedding_params as f64
    }

    pub fn kv_bytes_per_token_per_layer(&self) -> f64 {
        crate::memory::kv_bytes_per_token_per_layer(&self.kv_layout, self.kv_dtype_bytes)
    }

    /// Checks hard invariants and returns soft bookkeeping warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.name.is_empty() {
            return Err(invalid("name", "must not be empty"));
        }
        if self.num_layers == 0 {
            return Err(invalid("num_layers", "must be positive"));
        }
        if self.d_model == 0 || self.num_heads == 0 || self.head_dim == 0 {
            return Err(invalid("d_model/num_heads/head_dim", "must be positive"));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(invalid("top_k", "requires 1 ≤ k ≤ E"));
        }
        match self.ffn_kind {
            FfnKind::Dense => {
                if self.num_experts != 1 || self.top_k != 1 {
                    return Err(invalid("num_experts", "dense models have E = k = 1"));
                }
                if self.active_params != self.total_params {
                    return Err(invalid("active_params", "dense models have active_params = total_params"));
                }
            }
            FfnKind::Moe => {
                if self.active_params >= self.total_params {
                    return Err(invalid("active_params", "MoE models have active_params < total_params"));
                }
            }
        }
        if self.active_params > self.total_params {
            return Err(invalid("active_params", "must not exceed total_params"));
        }
        if self.ffn_params_per_layer == 0 {
            return Err(invalid("ffn_params_per_layer", "W_ffn must be positive"));
        }
        if self.ffn_hidden_dim == 0 || self.ffn_projections == 0 {
            return Err(invalid("ffn_hidden_dim", "FFN shape must be positive"));
        }
        if self.weight_dtype_bytes == 0 || self.kv_dtype_bytes == 0 {
            return Err(invalid("weight_dtype_bytes", "dtype sizes must be positive"));
        }
        self.kv_layout.validate(self.num_heads)?;

        let mut warnings = Vec::new();
        let implied = self.implied_total_params();
        let total = self.total_params as f64;
        if rel_diff(implied, total) > TOTAL_PARAMS_TOL {
            warnings.push(format!(
                "per-layer breakdown implies {implied:.4e} params but total_params is {total:.4e}"
            ));
        }
        let shape = self.num_experts as f64
            * self.ffn_projections as f64
            * self.d_model as f64
            * self.ffn_hidden_dim as f64;
        if rel_diff(shape, self.ffn_params_per_layer as f64) > EXPERT_SHAPE_TOL {
            warnings.push(format!(
                "E·projections·d_model·hidden = {shape:.4e} disagrees with ffn_params_per_layer = {:.4e}",
                self.ffn_params_per_layer as f64
            ));
        }
        let implied_active = self.num_layers as f64
            * (self.attn_params_per_layer as f64 + self.ffn_params_per_layer as f64 * self.sparsity())
            + self.embedding_params as f64;
        if rel_diff(implied_active, self.active_params as f64) > ACTIVE_PARAMS_TOL {
            warnings.push(format!(
                "routing implies {implied_active:.4e} active params but active_params is {:.4e}",
                self.active_params as f64
            ));
        }
        Ok(warnings)
    }
}

fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    Fp8,
    Bf16,
    Fp16,
    Fp32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct HardwareSpec {
    pub name: String,
    pub hbm_capacity_bytes: f64,
    /// Sustained HBM bandwidth, bytes/s.
    pub hbm_bandwidth: f64,
    /// Dense FLOP/s per dtype.
    pub flops_by_dtype: BTreeMap<Dtype, f64>,
    /// Unidirectional per-link bandwidth inside an island, bytes/s.
    pub intra_node_bw: f64,
    /// Unidirectional per-link bandwidth between islands, bytes/s.
    pub inter_node_bw: f64,
    /// Accelerators reachable over the node-local fabric.
    pub island_capacity: u32,
    /// Default per-step collective startup latency, seconds.
    pub collective_startup_latency: f64,
}

impl HardwareSpec {
    /// The reference accelerator: 180 GB HBM3e at 8 TB/s, FP8 4.5 PFLOP/s,
    /// 900/448 GB/s unidirectional links, 8-GPU islands.
    pub fn reference() -> Self {
        let mut flops = BTreeMap::new();
        flops.insert(Dtype::Fp8, 4.5e15);
        flops.insert(Dtype::Bf16, 2.25e15);
        HardwareSpec {
            name: String::from("reference-180gb"),
            hbm_capacity_bytes: 180.0 * crate::GB,
            hbm_bandwidth: 8.0e12,
            flops_by_dtype: flops,
            intra_node_bw: 900e9,
            inter_node_bw: 448e9,
            island_capacity: 8,
            collective_startup_latency: 1e-6,
        }
    }

    pub fn flops(&self, dtype: Dtype) -> Result<f64> {
        self.flops_by_dtype
            .get(&dtype)
            .copied()
            .ok_or_else(|| invalid("flops_by_dtype", format!("no FLOP/s rating for {dtype:?}")))
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("hbm_capacity_bytes", self.hbm_capacity_bytes),
            ("hbm_bandwidth", self.hbm_bandwidth),
            ("intra_node_bw", self.intra_node_bw),
            ("inter_node_bw", self.inter_node_bw),
        ];
        for (field, v) in rates {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(field, "must be finite and strictly positive"));
            }
        }
        if !(self.collective_startup_latency.is_finite() && self.collective_startup_latency >= 0.0) {
            return Err(invalid("collective_startup_latency", "must be finite and non-negative"));
        }
        if self.island_capacity == 0 {
            return Err(invalid("island_capacity", "must be at least 1"));
        }
        for dtype in [Dtype::Fp8, Dtype::Bf16] {
            let f = self.flops(dtype)?;
            if !(f.is_finite() && f > 0.0) {
                return Err(invalid("flops_by_dtype", "ratings must be strictly positive"));
            }
        }
        for f in self.flops_by_dtype.values() {
            if !(f.is_finite() && *f > 0.0) {
                return Err(invalid("flops_by_dtype", "ratings must be strictly positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub hardware: HardwareSpec,
    pub num_gpus: u32,
    pub reserve_bytes: f64,
    pub misc_bytes: f64,
    pub safety_fraction: f64,
}

impl ClusterSpec {
    /// Reference hardware with the default deductions (10 GB reserve,
    /// 6 GB misc, 5% safety).
    pub fn reference(num_gpus: u32) -> Self {
        ClusterSpec {
            hardware: HardwareSpec::reference(),
            num_gpus,
            reserve_bytes: 10.0 * crate::GB,
            misc_bytes: 6.0 * crate::GB,
            safety_fraction: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hardware.validate()?;
        if self.num_gpus == 0 {
            return Err(invalid("num_gpus", "must be at least 1"));
        }
        if !(self.reserve_bytes >= 0.0 && self.misc_bytes >= 0.0) {
            return Err(invalid("reserve_bytes", "deductions must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.safety_fraction) {
            return Err(invalid("safety_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum KvMode {
    None,
    Kvp,
    Cp,
}

impl fmt::Display for KvMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KvMode::None => "none",
            KvMode::Kvp => "kvp",
            KvMode::Cp => "cp",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct ParallelismPlan {
    pub tp: u32,
    pub ep: u32,
    pub pp: u32,
    pub kv_mode: KvMode,
    pub kv_degree: u32,
    pub dp: u32,
}

impl ParallelismPlan {
    pub const SINGLE: ParallelismPlan = ParallelismPlan { tp: 1, ep: 1, pp: 1, kv_mode: KvMode::None, kv_degree: 1, dp: 1 };

    /// GPUs in one replica's attention/FFN pool (excluding pipeline stages).
    pub fn pool(&self) -> u32 {
        self.tp * self.kv_degree
    }

    pub fn gpus_per_replica(&self) -> u64 {
        self.tp as u64 * self.pp as u64 * self.kv_degree as u64
    }

    pub fn gpu_count(&self) -> u64 {
        self.gpus_per_replica() * self.dp as u64
    }

    /// Total parallel group width used for tie-breaking.
    pub fn group_width(&self) -> u64 {
        self.tp as u64 * self.ep as u64 * self.kv_degree as u64
    }

    /// Canonical ordering key: (tp, ep, pp, kv_mode, kv_degree).
    pub fn canonical_key(&self) -> (u32, u32, u32, KvMode, u32) {
        (self.tp, self.ep, self.pp, self.kv_mode, self.kv_degree)
    }

    /// The same plan with EP clamped to what `model` can use; dense models
    /// always run with `ep = 1`.
    pub fn for_model(&self, model: &ModelSpec) -> ParallelismPlan {
        ParallelismPlan { ep: self.ep.min(model.num_experts), ..*self }
    }

    pub fn validate(&self, cluster: &ClusterSpec) -> Result<ParallelismPlan> {
        validate_plan(self, cluster)
    }
}

impl fmt::Display for ParallelismPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TP={} EP={} PP={} ", self.tp, self.ep, self.pp)?;
        match self.kv_mode {
            KvMode::None => f.write_str("KV=none")?,
            KvMode::Kvp => write!(f, "KVP={}", self.kv_degree)?,
            KvMode::Cp => write!(f, "CP={}", self.kv_degree)?,
        }
        write!(f, " DP={}", self.dp)
    }
}

/// Accepts `plan` iff every plan invariant holds against `cluster`.
pub fn validate_plan(plan: &ParallelismPlan, cluster: &ClusterSpec) -> Result<ParallelismPlan> {
    let factors = [plan.tp, plan.ep, plan.pp, plan.kv_degree, plan.dp];
    if factors.contains(&0) {
        return Err(invalid("plan", "all parallelism factors must be ≥ 1"));
    }
    if plan.kv_mode == KvMode::None && plan.kv_degree != 1 {
        return Err(invalid("plan.kv_degree", "kv_degree must be 1 when kv_mode = none"));
    }
    if plan.kv_mode != KvMode::None && plan.kv_degree < 2 {
        return Err(invalid("plan.kv_degree", "kvp/cp need kv_degree ≥ 2"));
    }
    if plan.gpu_count() != cluster.num_gpus as u64 {
        return Err(Error::PlanMismatch { product: plan.gpu_count(), num_gpus: cluster.num_gpus });
    }
    if plan.ep > plan.pool() {
        return Err(invalid("plan.ep", format!("ep = {} exceeds tp·kv_degree = {}", plan.ep, plan.pool())));
    }
    Ok(*plan)
}

/// Checks that `plan` is usable for `model` (EP cannot exceed the expert count).
pub fn check_plan_for_model(plan: &ParallelismPlan, model: &ModelSpec) -> Result<()> {
    if plan.ep > model.num_experts {
        return Err(invalid(
            "plan.ep",
            format!("ep = {} exceeds the {} experts of {}", plan.ep, model.num_experts, model.name),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    /// Context length L in tokens.
    pub context_length: u64,
    #[serde(default = "default_true")]
    pub decode_only: bool,
}

fn default_true() -> bool {
    true
}

impl WorkloadSpec {
    pub fn decode(context_length: u64) -> Self {
        WorkloadSpec { context_length, decode_only: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_length == 0 {
            return Err(invalid("context_length", "L must be at least 1"));
        }
        if !self.decode_only {
            return Err(invalid("decode_only", "only decode-stage workloads are modelled"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cluster(g: u32) -> ClusterSpec {
        ClusterSpec::reference(g)
    }

    fn plan(tp: u32, ep: u32, pp: u32, kv_mode: KvMode, kv: u32, dp: u32) -> ParallelismPlan {
        ParallelismPlan { tp, ep, pp, kv_mode, kv_degree: kv, dp }
    }

    #[test]
    fn reference_operating_points_validate() {
        assert!(validate_plan(&plan(8, 4, 1, KvMode::Kvp, 4, 1), &cluster(32)).is_ok());
        assert!(validate_plan(&plan(8, 4, 1, KvMode::Kvp, 8, 1), &cluster(64)).is_ok());
    }

    #[test]
    fn factorization_mismatch_reports_both_sides() {
        let err = validate_plan(&plan(8, 1, 1, KvMode::None, 1, 1), &cluster(32)).unwrap_err();
        assert_eq!(err, Error::PlanMismatch { product: 8, num_gpus: 32 });
    }

    #[test]
    fn ep_must_fit_inside_replica_pool() {
        assert!(validate_plan(&plan(2, 4, 1, KvMode::None, 1, 16), &cluster(32)).is_err());
        assert!(validate_plan(&plan(2, 4, 1, KvMode::Kvp, 2, 8), &cluster(32)).is_ok());
    }

    #[test]
    fn kv_degree_consistent_with_mode() {
        assert!(validate_plan(&plan(8, 1, 1, KvMode::None, 4, 1), &cluster(32)).is_err());
        assert!(validate_plan(&plan(8, 1, 1, KvMode::Kvp, 1, 4), &cluster(32)).is_err());
    }

    #[test]
    fn hardware_rejects_nonpositive_rates() {
        let mut hw = HardwareSpec::reference();
        assert!(hw.validate().is_ok());
        hw.hbm_bandwidth = 0.0;
        assert!(hw.validate().is_err());
        let mut hw = HardwareSpec::reference();
        hw.island_capacity = 0;
        assert!(hw.validate().is_err());
    }

    #[test]
    fn workload_rejects_zero_context() {
        assert!(WorkloadSpec::decode(0).validate().is_err());
        assert!(WorkloadSpec::decode(1).validate().is_ok());
    }
}
