//! Roofline decode latency: `t_token = max(t_compute, t_hbm) + t_comm,exposed`.
//!
//! All times are for one decode step of one replica, seen from its busiest
//! GPU; each step emits one token for every one of the replica's `n`
//! concurrent sequences.

use serde::{Deserialize, Serialize};

use crate::calibration::{Calibration, ShardingPolicy};
use crate::comm::{build_collective_schedule, exposed_comm, CommBreakdown, PhaseTimes};
use crate::memory::{kv_bytes_per_seq_per_gpu, resident_weights};
use crate::specs::{ClusterSpec, Dtype, HardwareSpec, ModelSpec, ParallelismPlan, WorkloadSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct PhaseCost {
    /// FLOPs executed by one GPU per step.
    pub flops: f64,
    /// HBM bytes read by one GPU per step.
    pub bytes: f64,
    pub compute_s: f64,
    pub hbm_s: f64,
}

impl PhaseCost {
    fn new(flops: f64, bytes: f64, flops_per_s: f64, bandwidth: f64) -> Self {
        PhaseCost { flops, bytes, compute_s: flops / flops_per_s, hbm_s: bytes / bandwidth }
    }

    /// Roofline time of the phase on its own; the overlap window.
    pub fn window(&self) -> f64 {
        self.compute_s.max(self.hbm_s)
    }
}

fn stage_layers(model: &ModelSpec, plan: &ParallelismPlan) -> f64 {
    model.num_layers as f64 / plan.pp as f64
}

/// FFN phase. Every resident expert is charged once per step (its expected
/// token count `n·k/E` is positive), so per-token FFN traffic is
/// `W / (R · β)` with `R = n·k/E`; compute is the active fraction only.
pub fn ffn_time(model: &ModelSpec, plan: &ParallelismPlan, batch: f64, hw: &HardwareSpec, policy: &ShardingPolicy) -> Result<PhaseCost> {
    let layers = stage_layers(model, plan);
    let flops = batch * 2.0 * model.ffn_params_per_layer as f64 * model.sparsity() * layers / plan.pool() as f64;
    let bytes = resident_weights(model, plan, policy).ffn_bytes;
    Ok(PhaseCost::new(flops, bytes, hw.flops(Dtype::Fp8)?, hw.hbm_bandwidth))
}

/// Attention math and KV reads: `4·L·H·d_head` FLOPs per layer per token in
/// BF16; each sequence reads its own sharded cache.
pub fn attn_time(
    model: &ModelSpec,
    plan: &ParallelismPlan,
    batch: f64,
    workload: &WorkloadSpec,
    hw: &HardwareSpec,
    policy: &ShardingPolicy,
) -> Result<PhaseCost> {
    let layers = stage_layers(model, plan);
    let per_token = 4.0 * workload.context_length as f64 * model.num_heads as f64 * model.head_dim as f64 * layers;
    let flops = batch * per_token / plan.pool() as f64;
    let bytes = batch * kv_bytes_per_seq_per_gpu(model, plan, workload, policy);
    Ok(PhaseCost::new(flops, bytes, hw.flops(Dtype::Bf16)?, hw.hbm_bandwidth))
}

/// Attention projections plus the output head; weights amortize over the
/// whole batch.
pub fn projection_time(model: &ModelSpec, plan: &ParallelismPlan, batch: f64, hw: &HardwareSpec, policy: &ShardingPolicy) -> Result<PhaseCost> {
    let layers = stage_layers(model, plan);
    // Half of the embedding parameters are the unembedding GEMM.
    let params = model.attn_params_per_layer as f64 * layers + model.embedding_params as f64 / 2.0 / plan.pp as f64;
    let flops = batch * 2.0 * params / plan.pool() as f64;
    let w = resident_weights(model, plan, policy);
    Ok(PhaseCost::new(flops, w.attention_bytes + w.embedding_bytes, hw.flops(Dtype::Fp8)?, hw.hbm_bandwidth))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct HbmDetail {
    pub ffn_weight_bytes: f64,
    pub attn_weight_bytes: f64,
    pub kv_read_bytes: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct ComputeDetail {
    pub proj_flops: f64,
    pub attn_flops: f64,
    pub ffn_flops: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct LatencyBreakdown {
    /// Concurrent sequences per replica decoded in one step.
    pub batch_per_replica: u64,
    pub t_compute: f64,
    pub t_hbm: f64,
    pub t_comm_exposed: f64,
    /// Seconds per decode step; one token per sequence.
    pub t_token: f64,
    /// Per-GPU HBM bytes per step.
    pub hbm_detail: HbmDetail,
    /// Per-GPU FLOPs per step.
    pub compute_detail: ComputeDetail,
    pub windows: PhaseTimes,
    pub comm: CommBreakdown,
}

impl LatencyBreakdown {
    /// Per-token HBM bytes, one GPU's share.
    pub fn hbm_bytes_per_token(&self) -> HbmDetail {
        let n = self.batch_per_replica as f64;
        HbmDetail {
            ffn_weight_bytes: self.hbm_detail.ffn_weight_bytes / n,
            attn_weight_bytes: self.hbm_detail.attn_weight_bytes / n,
            kv_read_bytes: self.hbm_detail.kv_read_bytes / n,
        }
    }
}

pub fn token_latency(
    model: &ModelSpec,
    plan: &ParallelismPlan,
    batch_per_replica: u64,
    workload: &WorkloadSpec,
    cluster: &ClusterSpec,
    calibration: &Calibration,
) -> Result<LatencyBreakdown> {
    if batch_per_replica == 0 {
        return Err(Error::Domain(alloc::string::String::from("latency is undefined for an infeasible (B = 0) point")));
    }
    let hw = &cluster.hardware;
    let policy = &calibration.sharding;
    let n = batch_per_replica as f64;
    let attn = attn_time(model, plan, n, workload, hw, policy)?;
    let proj = projection_time(model, plan, n, hw, policy)?;
    let ffn = ffn_time(model, plan, n, hw, policy)?;
    let windows = PhaseTimes { attention: attn.window(), projection: proj.window(), ffn: ffn.window() };
    let schedule = build_collective_schedule(model, plan, n, hw, &calibration.comm, policy);
    let comm = exposed_comm(&schedule, &windows, &calibration.comm, hw);
    let t_compute = attn.compute_s + proj.compute_s + ffn.compute_s;
    let t_hbm = attn.hbm_s + proj.hbm_s + ffn.hbm_s;
    Ok(LatencyBreakdown {
        batch_per_replica,
        t_compute,
        t_hbm,
        t_comm_exposed: comm.exposed,
        t_token: t_compute.max(t_hbm) + comm.exposed,
        hbm_detail: HbmDetail { ffn_weight_bytes: ffn.bytes, attn_weight_bytes: proj.bytes, kv_read_bytes: attn.bytes },
        compute_detail: ComputeDetail { proj_flops: proj.flops, attn_flops: attn.flops, ffn_flops: ffn.flops },
        windows,
        comm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct ThroughputReport {
    pub tokens_per_s_cluster: f64,
    pub tokens_per_s_per_gpu: f64,
    /// Percent of the named baseline's cluster throughput.
    pub relative_pct: Option<f64>,
    pub baseline: Option<alloc::string::String>,
}

impl ThroughputReport {
    pub fn relative_to(mut self, baseline: &str, baseline_tokens_per_s: f64) -> Self {
        self.relative_pct = Some(100.0 * (self.tokens_per_s_cluster / baseline_tokens_per_s));
        self.baseline = Some(alloc::string::String::from(baseline));
        self
    }
}

/// Cluster tokens/s = `B_aggregate / t_token`; pipeline utilization is 1.
pub fn throughput(batch_aggregate: u64, latency: &LatencyBreakdown, cluster: &ClusterSpec) -> ThroughputReport {
    let per_gpu = batch_aggregate as f64 / latency.t_token / cluster.num_gpus as f64;
    ThroughputReport {
        tokens_per_s_cluster: per_gpu * cluster.num_gpus as f64,
        tokens_per_s_per_gpu: per_gpu,
        relative_pct: None,
        baseline: None,
    }
}
