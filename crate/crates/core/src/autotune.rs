//! Exhaustive parallelism search.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::calibration::Calibration;
use crate::error::invalid;
use crate::latency::{throughput, token_latency, LatencyBreakdown, ThroughputReport};
use crate::memory::{feasibility, MemoryReport};
use crate::reuse::expert_local_batch;
use crate::specs::{check_plan_for_model, validate_plan, ClusterSpec, KvMode, ModelSpec, ParallelismPlan, WorkloadSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub tp_choices: Vec<u32>,
    pub ep_choices: Vec<u32>,
    pub pp_choices: Vec<u32>,
    pub kv_modes: Vec<KvMode>,
    /// KV-parallel degrees; `None` means every divisor ≥ 2 of the GPU count.
    #[serde(default)]
    pub kv_degrees: Option<Vec<u32>>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            tp_choices: alloc::vec![1, 2, 4, 8],
            ep_choices: alloc::vec![1, 2, 4, 8],
            pp_choices: alloc::vec![1, 2, 4],
            kv_modes: alloc::vec![KvMode::None, KvMode::Kvp, KvMode::Cp],
            kv_degrees: None,
        }
    }
}

impl SearchSpace {
    /// A space containing exactly `plan`'s shape.
    pub fn singleton(plan: &ParallelismPlan) -> Self {
        SearchSpace {
            tp_choices: alloc::vec![plan.tp],
            ep_choices: alloc::vec![plan.ep],
            pp_choices: alloc::vec![plan.pp],
            kv_modes: alloc::vec![plan.kv_mode],
            kv_degrees: Some(alloc::vec![plan.kv_degree]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sets: [(&'static str, &[u32]); 3] =
            [("tp_choices", &self.tp_choices), ("ep_choices", &self.ep_choices), ("pp_choices", &self.pp_choices)];
        for (field, set) in sets {
            if set.is_empty() || set.contains(&0) {
                return Err(invalid(field, "must be non-empty with every choice ≥ 1"));
            }
        }
        if self.kv_modes.is_empty() {
            return Err(invalid("kv_modes", "must be non-empty"));
        }
        if let Some(d) = &self.kv_degrees {
            if d.is_empty() || d.contains(&0) {
                return Err(invalid("kv_degrees", "must be non-empty with every choice ≥ 1"));
            }
        }
        Ok(())
    }

    fn kv_degrees_for(&self, num_gpus: u32) -> Vec<u32> {
        match &self.kv_degrees {
            Some(d) => d.clone(),
            None => (2..=num_gpus).filter(|d| num_gpus.is_multiple_of(*d)).collect(),
        }
    }
}

/// All plans in `space` valid on `cluster`, in canonical order.
pub fn enumerate_plans(space: &SearchSpace, cluster: &ClusterSpec) -> Result<Vec<ParallelismPlan>> {
    space.validate()?;
    let g = cluster.num_gpus;
    let sorted = |v: &[u32]| v.iter().copied().collect::<BTreeSet<_>>();
    let modes: BTreeSet<KvMode> = space.kv_modes.iter().copied().collect();
    let degrees = sorted(&space.kv_degrees_for(g));
    let (mut factor_fail, mut ep_fail) = (0usize, 0usize);
    let mut plans = Vec::new();
    for tp in sorted(&space.tp_choices) {
        for ep in sorted(&space.ep_choices) {
            for pp in sorted(&space.pp_choices) {
                for &mode in &modes {
                    let kv_set: Vec<u32> = match mode {
                        KvMode::None => alloc::vec![1],
                        _ => degrees.iter().copied().filter(|&d| d >= 2).collect(),
                    };
                    for kv in kv_set {
                        let replica = tp as u64 * pp as u64 * kv as u64;
                        if replica == 0 || !(g as u64).is_multiple_of(replica) {
                            factor_fail += 1;
                            continue;
                        }
                        let plan = ParallelismPlan { tp, ep, pp, kv_mode: mode, kv_degree: kv, dp: (g as u64 / replica) as u32 };
                        match validate_plan(&plan, cluster) {
                            Ok(p) => plans.push(p),
                            Err(_) => ep_fail += 1,
                        }
                    }
                }
            }
        }
    }
    if plans.is_empty() {
        let binding = if ep_fail > 0 {
            format!("every plan dividing {g} GPUs violates ep ≤ tp·kv_degree")
        } else {
            format!("no tp·pp·kv_degree combination divides {g} GPUs ({factor_fail} tried)")
        };
        return Err(Error::NoValidPlan(binding));
    }
    Ok(plans)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct ReuseFragment {
    pub batch_aggregate: u64,
    /// `B·k/E` for one replica's batch.
    pub expert_local_batch: f64,
    pub sub_unit_expert_batch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct PlanReport {
    pub plan: ParallelismPlan,
    pub feasible: bool,
    /// Why the plan cannot run; `None` when feasible.
    pub reason: Option<String>,
    pub memory: Option<MemoryReport>,
    pub reuse: Option<ReuseFragment>,
    pub latency: Option<LatencyBreakdown>,
    pub throughput: Option<ThroughputReport>,
}

impl PlanReport {
    fn infeasible(plan: ParallelismPlan, reason: String, memory: Option<MemoryReport>) -> Self {
        PlanReport { plan, feasible: false, reason: Some(reason), memory, reuse: None, latency: None, throughput: None }
    }

    pub fn tokens_per_s(&self) -> Option<f64> {
        self.throughput.as_ref().map(|t| t.tokens_per_s_cluster)
    }

    pub fn t_token(&self) -> Option<f64> {
        self.latency.as_ref().map(|l| l.t_token)
    }

    pub fn batch_aggregate(&self) -> u64 {
        self.memory.map_or(0, |m| m.batch_aggregate)
    }
}

/// Feasibility, latency and throughput of one plan. Plan-shape errors are
/// returned as `Err`; capacity failures as an infeasible report.
pub fn evaluate_plan(
    model: &ModelSpec,
    plan: &ParallelismPlan,
    cluster: &ClusterSpec,
    workload: &WorkloadSpec,
    calibration: &Calibration,
) -> Result<PlanReport> {
    workload.validate()?;
    let plan = validate_plan(plan, cluster)?;
    if let Err(e) = check_plan_for_model(&plan, model) {
        return Ok(PlanReport::infeasible(plan, e.to_string(), None));
    }
    let memory = feasibility(model, &plan, cluster, workload, &calibration.sharding)?;
    if !memory.feasible {
        let reason = if memory.resident_weight_bytes > memory.budget_bytes {
            format!(
                "OOM: resident weights {:.1} GB exceed the {:.1} GB budget",
                memory.resident_weight_bytes / crate::GB,
                memory.budget_bytes / crate::GB
            )
        } else {
            format!(
                "OOM: {:.1} GB free after weights cannot hold one {:.1} GB sequence",
                (memory.budget_bytes - memory.resident_weight_bytes) / crate::GB,
                memory.kv_bytes_per_seq_per_gpu / crate::GB
            )
        };
        return Ok(PlanReport::infeasible(plan, reason, Some(memory)));
    }
    let latency = token_latency(model, &plan, memory.n_eff_max, workload, cluster, calibration)?;
    let tput = throughput(memory.batch_aggregate, &latency, cluster);
    let local = expert_local_batch(memory.n_eff_max as f64, model.top_k, model.num_experts);
    Ok(PlanReport {
        plan,
        feasible: true,
        reason: None,
        memory: Some(memory),
        reuse: Some(ReuseFragment { batch_aggregate: memory.batch_aggregate, expert_local_batch: local, sub_unit_expert_batch: local < 1.0 }),
        latency: Some(latency),
        throughput: Some(tput),
    })
}

/// Total ranking order: feasible first; then higher tokens/s, lower
/// `t_token`, narrower `tp·ep·kv_degree`, canonical order.
pub fn rank_cmp(a: &PlanReport, b: &PlanReport) -> Ordering {
    match (a.feasible, b.feasible) {
        (true, false) => return Ordering::Less,
        (false, true) => return Ordering::Greater,
        (true, true) => {
            let (ta, tb) = (a.tokens_per_s().unwrap_or(0.0), b.tokens_per_s().unwrap_or(0.0));
            let (la, lb) = (a.t_token().unwrap_or(f64::INFINITY), b.t_token().unwrap_or(f64::INFINITY));
            let ord = tb.total_cmp(&ta).then(la.total_cmp(&lb));
            if ord != Ordering::Equal {
                return ord;
            }
        }
        (false, false) => {}
    }
    a.plan
        .group_width()
        .cmp(&b.plan.group_width())
        .then(a.plan.canonical_key().cmp(&b.plan.canonical_key()))
}

/// Associative, commutative choice of the better report.
pub fn better<'a>(a: &'a PlanReport, b: &'a PlanReport) -> &'a PlanReport {
    if rank_cmp(b, a) == Ordering::Less {
        b
    } else {
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct AutotuneResult {
    pub model: String,
    pub context_length: u64,
    pub num_gpus: u32,
    /// Highest-throughput feasible plan, if any.
    pub best: Option<PlanReport>,
    /// Every evaluated plan, best first; infeasible plans last with reasons.
    pub ranking: Vec<PlanReport>,
    pub feasible_count: usize,
}

impl AutotuneResult {
    pub fn is_feasible(&self) -> bool {
        self.best.is_some()
    }
}

/// Sorts independently evaluated reports into an [`AutotuneResult`].
pub fn rank_reports(model: &ModelSpec, cluster: &ClusterSpec, workload: &WorkloadSpec, mut reports: Vec<PlanReport>) -> AutotuneResult {
    reports.sort_by(rank_cmp);
    let feasible_count = reports.iter().filter(|r| r.feasible).count();
    AutotuneResult {
        model: model.name.clone(),
        context_length: workload.context_length,
        num_gpus: cluster.num_gpus,
        best: reports.first().filter(|r| r.feasible).cloned(),
        ranking: reports,
        feasible_count,
    }
}

/// Evaluates every plan of `space` and ranks them.
pub fn autotune(
    model: &ModelSpec,
    cluster: &ClusterSpec,
    workload: &WorkloadSpec,
    space: &SearchSpace,
    calibration: &Calibration,
) -> Result<AutotuneResult> {
    let plans = enumerate_plans(space, cluster)?;
    let reports = plans
        .iter()
        .map(|p| evaluate_plan(model, p, cluster, workload, calibration))
        .collect::<Result<Vec<_>>>()?;
    Ok(rank_reports(model, cluster, workload, reports))
}
