//! Per-GPU HBM budget, resident weights, KV footprint and the maximum
//! feasible concurrent batch `n_eff,max`.

use serde::{Deserialize, Serialize};

use crate::calibration::{FfnSharding, KvTpSharding, ShardingPolicy};
use crate::specs::{ClusterSpec, KvKind, KvLayout, KvMode, ModelSpec, ParallelismPlan, WorkloadSpec};
use crate::{Error, Result};

/// `(HBM_cap − reserve − misc) · (1 − safety)`.
pub fn hbm_budget(cluster: &ClusterSpec) -> Result<f64> {
    let hw = &cluster.hardware;
    let budget = (hw.hbm_capacity_bytes - cluster.reserve_bytes - cluster.misc_bytes) * (1.0 - cluster.safety_fraction);
    if !(budget > 0.0) {
        return Err(Error::NonPositiveBudget { budget_bytes: budget });
    }
    Ok(budget)
}

pub fn kv_bytes_per_token_per_layer(layout: &KvLayout, kv_dtype_bytes: u32) -> f64 {
    layout.elements_per_token_per_layer() as f64 * kv_dtype_bytes as f64
}

/// How many ways one sequence's cache is split across the TP group.
pub fn kv_tp_shards(model: &ModelSpec, plan: &ParallelismPlan, policy: &ShardingPolicy) -> f64 {
    match policy.kv_tp {
        KvTpSharding::Replicated => 1.0,
        KvTpSharding::HeadSharded => match model.kv_layout.kind {
            KvKind::Mla => plan.tp.min(policy.mla_latent_tp_shards) as f64,
            _ => {
                let heads = model.kv_layout.num_kv_heads;
                heads as f64 / heads.div_ceil(plan.tp) as f64
            }
        },
    }
}

/// Total split of one sequence's cache within a pipeline stage.
pub fn kv_shard_factor(model: &ModelSpec, plan: &ParallelismPlan, policy: &ShardingPolicy) -> f64 {
    let kv = match plan.kv_mode {
        KvMode::None => 1.0,
        KvMode::Kvp | KvMode::Cp => plan.kv_degree as f64,
    };
    kv * kv_tp_shards(model, plan, policy)
}

/// `L · kv_bytes_per_token_per_layer · num_layers / (kv_shard_factor · pp)`.
pub fn kv_bytes_per_seq_per_gpu(
    model: &ModelSpec,
    plan: &ParallelismPlan,
    workload: &WorkloadSpec,
    policy: &ShardingPolicy,
) -> f64 {
    workload.context_length as f64 * model.kv_bytes_per_token_per_layer() * model.num_layers as f64
        / (kv_shard_factor(model, plan, policy) * plan.pp as f64)
}

/// GPUs of one stage that share the expert pool under pooled sharding:
/// each expert is tensor-parallel over `tp` ranks and EP groups spread over
/// the KV-parallel ranks, `min(ep · tp, tp · kv_degree)`.
pub fn expert_pool_width(plan: &ParallelismPlan) -> u32 {
    (plan.ep * plan.tp).min(plan.pool())
}

/// Divisor applied to the FFN weights of one layer.
pub fn ffn_shard_factor(model: &ModelSpec, plan: &ParallelismPlan, policy: &ShardingPolicy) -> f64 {
    let within_stage = match policy.ffn {
        FfnSharding::EpOnly if model.is_dense() => plan.tp,
        FfnSharding::EpOnly => plan.ep,
        FfnSharding::Pooled if model.is_dense() => plan.pool(),
        FfnSharding::Pooled => expert_pool_width(plan),
    };
    within_stage as f64 * plan.pp as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct ResidentWeights {
    pub attention_bytes: f64,
    pub embedding_bytes: f64,
    pub ffn_bytes: f64,
    pub total_bytes: f64,
}

/// Weight bytes resident on each GPU under `plan`.
pub fn resident_weights(model: &ModelSpec, plan: &ParallelismPlan, policy: &ShardingPolicy) -> ResidentWeights {
    let tp_pp = plan.tp as f64 * plan.pp as f64;
    let layers = model.num_layers as f64;
    let attention_bytes = layers * model.attn_weight_bytes_per_layer() / tp_pp;
    let embedding_bytes = model.embedding_weight_bytes() / tp_pp;
    let ffn_bytes = layers * model.ffn_weight_bytes_per_layer() / ffn_shard_factor(model, plan, policy);
    ResidentWeights { attention_bytes, embedding_bytes, ffn_bytes, total_bytes: attention_bytes + embedding_bytes + ffn_bytes }
}

pub fn resident_weight_bytes(model: &ModelSpec, plan: &ParallelismPlan, policy: &ShardingPolicy) -> f64 {
    resident_weights(model, plan, policy).total_bytes
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct MemoryReport {
    pub budget_bytes: f64,
    pub resident_weight_bytes: f64,
    pub resident: ResidentWeights,
    pub kv_bytes_per_seq_per_gpu: f64,
    /// Concurrent sequences per replica (0 when infeasible).
    pub n_eff_max: u64,
    pub feasible: bool,
    /// `n_eff_max · dp`, the cluster-level batch B.
    pub batch_aggregate: u64,
}

pub fn feasibility(
    model: &ModelSpec,
    plan: &ParallelismPlan,
    cluster: &ClusterSpec,
    workload: &WorkloadSpec,
    policy: &ShardingPolicy,
) -> Result<MemoryReport> {
    let budget = hbm_budget(cluster)?;
    let resident = resident_weights(model, plan, policy);
    let kv = kv_bytes_per_seq_per_gpu(model, plan, workload, policy);
    let free = budget - resident.total_bytes;
    let n_eff_max = if free <= 0.0 || !(kv > 0.0) {
        0
    } else {
        // Saturating float→int cast; the result is far below u64::MAX in practice.
        libm::floor(free / kv) as u64
    };
    Ok(MemoryReport {
        budget_bytes: budget,
        resident_weight_bytes: resident.total_bytes,
        resident,
        kv_bytes_per_seq_per_gpu: kv,
        n_eff_max,
        feasible: n_eff_max >= 1,
        batch_aggregate: n_eff_max * plan.dp as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::ShardingPolicy;
    use crate::specs::{FfnKind, HardwareSpec, KvLayout};
    use crate::GB;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs()
    }

    fn plan(tp: u32, ep: u32, pp: u32, kv_mode: KvMode, kv: u32, dp: u32) -> ParallelismPlan {
        ParallelismPlan { tp, ep, pp, kv_mode, kv_degree: kv, dp }
    }

    fn mla_model() -> ModelSpec {
        ModelSpec {
            name: "mla".into(),
            num_layers: 61,
            d_model: 7168,
            num_heads: 128,
            head_dim: 128,
            ffn_kind: FfnKind::Moe,
            num_experts: 256,
            top_k: 8,
            ffn_hidden_dim: 2048,
            ffn_projections: 3,
            ffn_params_per_layer: 256 * 3 * 7168 * 2048,
            attn_params_per_layer: 187_107_328,
            embedding_params: 1_853_358_080,
            total_params: 700_000_000_000,
            active_params: 37_000_000_000,
            kv_layout: KvLayout::mla(512, 64),
            weight_dtype_bytes: 1,
            kv_dtype_bytes: 2,
        }
    }

    #[test]
    fn budget_examples() {
        let c = ClusterSpec::reference(8);
        assert!(close(hbm_budget(&c).unwrap(), 155.8 * GB, 1e-12));
        let c = ClusterSpec { reserve_bytes: 0.0, misc_bytes: 0.0, safety_fraction: 0.0, ..c };
        assert_eq!(hbm_budget(&c).unwrap(), 180.0 * GB);
        let mut hw = HardwareSpec::reference();
        hw.hbm_capacity_bytes = 80.0 * GB;
        let c = ClusterSpec { hardware: hw, num_gpus: 1, reserve_bytes: 80.0 * GB, misc_bytes: 0.0, safety_fraction: 0.0 };
        assert!(matches!(hbm_budget(&c), Err(Error::NonPositiveBudget { .. })));
    }

    #[test]
    fn kv_bytes_per_token_examples() {
        // 512 latent + 64 rope elements, two bytes each.
        assert_eq!(kv_bytes_per_token_per_layer(&KvLayout::mla(512, 64), 2), 1152.0);
        assert_eq!(kv_bytes_per_token_per_layer(&KvLayout::gqa(1, 128), 2), 512.0);
        assert_eq!(kv_bytes_per_token_per_layer(&KvLayout::gqa(8, 128), 2), 4096.0);
    }

    #[test]
    fn kv_per_seq_mla_kvp8() {
        let m = mla_model();
        let p = plan(8, 8, 1, KvMode::Kvp, 8, 1);
        let got = kv_bytes_per_seq_per_gpu(&m, &p, &WorkloadSpec::decode(131_072), &ShardingPolicy::default());
        let expected = 131_072.0 * 1152.0 * 61.0 / 8.0;
        assert_eq!(got, expected);
        assert!(close(got, 1.151 * GB, 1e-3));
    }

    #[test]
    fn kv_none_is_the_full_sequence() {
        let m = mla_model();
        let got = kv_bytes_per_seq_per_gpu(&m, &plan(8, 1, 1, KvMode::None, 1, 1), &WorkloadSpec::decode(1000), &ShardingPolicy::default());
        assert_eq!(got, 1000.0 * 1152.0 * 61.0);
    }

    #[test]
    fn head_sharding_caps_at_kv_heads() {
        let mut m = mla_model();
        m.kv_layout = KvLayout::gqa(4, 128);
        let policy = ShardingPolicy { kv_tp: KvTpSharding::HeadSharded, ..ShardingPolicy::default() };
        assert_eq!(kv_tp_shards(&m, &plan(2, 1, 1, KvMode::None, 1, 1), &policy), 2.0);
        assert_eq!(kv_tp_shards(&m, &plan(8, 1, 1, KvMode::None, 1, 1), &policy), 4.0);
        m.kv_layout = KvLayout::gqa(8, 128);
        // 8 heads over 3 ranks: the busiest rank holds 3 heads.
        assert_eq!(kv_tp_shards(&m, &plan(3, 1, 1, KvMode::None, 1, 1), &policy), 8.0 / 3.0);
        let m = mla_model();
        let policy = ShardingPolicy { kv_tp: KvTpSharding::HeadSharded, mla_latent_tp_shards: 4, ..policy };
        assert_eq!(kv_tp_shards(&m, &plan(8, 1, 1, KvMode::None, 1, 1), &policy), 4.0);
        assert_eq!(kv_tp_shards(&m, &plan(2, 1, 1, KvMode::None, 1, 1), &policy), 2.0);
    }

    #[test]
    fn ep_only_expert_sharding() {
        let m = mla_model();
        let policy = ShardingPolicy::default();
        let w4 = resident_weights(&m, &plan(8, 4, 1, KvMode::Kvp, 4, 1), &policy);
        let w8 = resident_weights(&m, &plan(8, 8, 1, KvMode::Kvp, 4, 1), &policy);
        assert_eq!(w4.ffn_bytes, 2.0 * w8.ffn_bytes);
        assert_eq!(w8.ffn_bytes, 61.0 * m.ffn_weight_bytes_per_layer() / 8.0);
        assert_eq!(w4.attention_bytes, 61.0 * m.attn_weight_bytes_per_layer() / 8.0);
    }

    #[test]
    fn pooled_sharding_spreads_ffn_over_the_replica() {
        let m = mla_model();
        let policy = ShardingPolicy { ffn: FfnSharding::Pooled, ..ShardingPolicy::default() };
        let w = resident_weights(&m, &plan(8, 8, 2, KvMode::Kvp, 4, 1), &policy);
        assert_eq!(w.ffn_bytes, 61.0 * m.ffn_weight_bytes_per_layer() / 64.0);
        // EP narrower than the KV-parallel degree leaves experts replicated.
        let w = resident_weights(&m, &plan(8, 2, 1, KvMode::Kvp, 4, 1), &policy);
        assert_eq!(w.ffn_bytes, 61.0 * m.ffn_weight_bytes_per_layer() / 16.0);
        assert_eq!(w.embedding_bytes, m.embedding_weight_bytes() / 8.0);
    }

    #[test]
    fn unsharded_dense_holds_everything() {
        let mut m = mla_model();
        m.ffn_kind = FfnKind::Dense;
        m.num_experts = 1;
        m.top_k = 1;
        m.ffn_params_per_layer = 3 * 7168 * 4096;
        let w = resident_weight_bytes(&m, &ParallelismPlan::SINGLE, &ShardingPolicy::default());
        assert_eq!(w, m.implied_total_params() * m.weight_dtype_bytes as f64);
    }

    #[test]
    fn weights_over_budget_mean_zero_batch() {
        let m = mla_model();
        let c = ClusterSpec::reference(1);
        let r = feasibility(&m, &ParallelismPlan::SINGLE, &c, &WorkloadSpec::decode(1024), &ShardingPolicy::default()).unwrap();
        assert_eq!(r.n_eff_max, 0);
        assert!(!r.feasible);
        assert_eq!(r.batch_aggregate, 0);
    }

    #[test]
    fn batch_aggregates_over_dp() {
        let mut m = mla_model();
        m.ffn_params_per_layer = 256 * 3 * 64 * 64;
        let c = ClusterSpec::reference(4);
        let p = plan(1, 1, 1, KvMode::None, 1, 4);
        let r = feasibility(&m, &p, &c, &WorkloadSpec::decode(4096), &ShardingPolicy::default()).unwrap();
        let expected = libm::floor((r.budget_bytes - r.resident_weight_bytes) / r.kv_bytes_per_seq_per_gpu) as u64;
        assert_eq!(r.n_eff_max, expected);
        assert_eq!(r.batch_aggregate, 4 * expected);
    }
}
