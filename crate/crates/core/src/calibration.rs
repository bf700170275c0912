//! Calibration knobs: every number the model needs that the architecture and
//! hardware specs do not pin down.

use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::comm::CommConfig;
use crate::error::invalid;
use crate::specs::ClusterSpec;
use crate::{Result, GB};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct MemoryKnobs {
    pub reserve_bytes: f64,
    /// Activations, workspace and runtime overheads folded into one term.
    pub misc_bytes: f64,
    pub safety_fraction: f64,
}

impl Default for MemoryKnobs {
    fn default() -> Self {
        MemoryKnobs { reserve_bytes: 10.0 * GB, misc_bytes: 6.0 * GB, safety_fraction: 0.05 }
    }
}

/// How FFN weights are laid out over a replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum FfnSharding {
    /// Experts split over `ep · pp` only; dense FFNs over `tp · pp`.
    EpOnly,
    /// The FFN phase re-partitions the `tp · kv_degree` pool: dense FFNs are
    /// tensor-parallel over all of it; experts are tensor-parallel over `tp`
    /// and spread over `min(ep · tp, pool)` GPUs.
    Pooled,
}

/// How KV heads are laid out across the tensor-parallel group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum KvTpSharding {
    /// Every TP rank holds the full (KV-parallel-sharded) cache.
    Replicated,
    /// KV heads are split across TP ranks (replicated once tp exceeds the
    /// KV head count); MLA latents split `min(tp, mla_latent_tp_shards)` ways.
    HeadSharded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct ShardingPolicy {
    pub ffn: FfnSharding,
    pub kv_tp: KvTpSharding,
    /// Effective TP split of an MLA latent cache under `head_sharded`.
    pub mla_latent_tp_shards: u32,
}

impl Default for ShardingPolicy {
    fn default() -> Self {
        ShardingPolicy { ffn: FfnSharding::EpOnly, kv_tp: KvTpSharding::Replicated, mla_latent_tp_shards: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub id: String,
    pub memory: MemoryKnobs,
    pub sharding: ShardingPolicy,
    pub comm: CommConfig,
}

impl Default for Calibration {
    /// Uncalibrated defaults: the nominal deductions, EP-only expert
    /// sharding, TP-replicated KV and the default communication knobs.
    fn default() -> Self {
        Calibration {
            id: String::from("uncalibrated-defaults"),
            memory: MemoryKnobs::default(),
            sharding: ShardingPolicy::default(),
            comm: CommConfig::default(),
        }
    }
}

impl Calibration {
    pub fn validate(&self) -> Result<()> {
        let m = &self.memory;
        if !(m.reserve_bytes >= 0.0 && m.misc_bytes >= 0.0) {
            return Err(invalid("memory", "reserve and misc must be non-negative"));
        }
        if !(0.0..1.0).contains(&m.safety_fraction) {
            return Err(invalid("memory.safety_fraction", "must lie in [0, 1)"));
        }
        if self.sharding.mla_latent_tp_shards == 0 {
            return Err(invalid("sharding.mla_latent_tp_shards", "must be at least 1"));
        }
        self.comm.validate()
    }

    /// `cluster` with this calibration's memory deductions.
    pub fn apply(&self, cluster: &ClusterSpec) -> ClusterSpec {
        ClusterSpec {
            reserve_bytes: self.memory.reserve_bytes,
            misc_bytes: self.memory.misc_bytes,
            safety_fraction: self.memory.safety_fraction,
            ..cluster.clone()
        }
    }
}
