//! FFN weight reuse and the routing × capacity factorization of the gap.

use serde::{Deserialize, Serialize};

use crate::specs::ModelSpec;
use crate::{Error, Result};

/// Average tokens routed to one expert, `B·k/E`. Not floored.
pub fn expert_local_batch(batch: f64, top_k: u32, num_experts: u32) -> f64 {
    batch * top_k as f64 / num_experts as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct ReuseReport {
    pub b_moe: f64,
    pub b_dense: f64,
    pub r_moe: f64,
    pub r_dense: f64,
    /// E/k, scaled by the imbalance multiplier.
    pub routing_factor: f64,
    /// B_dense / B_moe.
    pub capacity_factor: f64,
    /// R_dense / R_moe.
    pub total_gap: f64,
    pub imbalance: f64,
    /// Set when an expert sees less than one token per step on average.
    pub sub_unit_expert_batch: bool,
}

pub fn reuse_gap(moe: &ModelSpec, dense: &ModelSpec, b_moe: f64, b_dense: f64) -> Result<ReuseReport> {
    reuse_gap_with_imbalance(moe, dense, b_moe, b_dense, 1.0)
}

/// As [`reuse_gap`], with a load-imbalance multiplier (≥ 1) on the routing
/// factor, i.e. effective per-expert reuse is divided by `imbalance`.
pub fn reuse_gap_with_imbalance(
    moe: &ModelSpec,
    dense: &ModelSpec,
    b_moe: f64,
    b_dense: f64,
    imbalance: f64,
) -> Result<ReuseReport> {
    if !(imbalance >= 1.0 && imbalance.is_finite()) {
        return Err(Error::Domain(alloc::format!("imbalance multiplier must be ≥ 1, got {imbalance}")));
    }
    if !(b_moe >= 0.0 && b_dense >= 0.0) {
        return Err(Error::Domain(alloc::format!("batch sizes must be non-negative, got {b_moe}, {b_dense}")));
    }
    if b_moe == 0.0 {
        return Err(Error::InfeasibleMoe);
    }
    let per_expert = |m: &ModelSpec, b: f64| expert_local_batch(b, m.top_k, m.num_experts);
    let routing_factor = moe.num_experts as f64 / moe.top_k as f64 * imbalance;
    let dense_routing = dense.num_experts as f64 / dense.top_k as f64;
    let r_moe = per_expert(moe, b_moe) / imbalance;
    let r_dense = per_expert(dense, b_dense);
    let capacity_factor = b_dense / b_moe;
    Ok(ReuseReport {
        b_moe,
        b_dense,
        r_moe,
        r_dense,
        routing_factor: routing_factor / dense_routing,
        capacity_factor,
        total_gap: r_dense / r_moe,
        imbalance,
        sub_unit_expert_batch: r_moe < 1.0,
    })
}
