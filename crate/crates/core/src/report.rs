//! Paired MoE-versus-dense comparisons, context sweeps and decode-time
//! attribution (the computations behind the CLI tables).

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autotune::{autotune, evaluate_plan, PlanReport, SearchSpace};
use crate::calibration::Calibration;
use crate::latency::LatencyBreakdown;
use crate::qs::{qs_verdict, sparsity, synthesize_dense_baseline, Verdict};
use crate::reuse::{reuse_gap, ReuseReport};
use crate::specs::{ClusterSpec, ModelSpec, ParallelismPlan, WorkloadSpec};
use crate::{Error, Result};

/// How each variant's plan is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum PlanChoice {
    /// The same plan for both variants (EP clamped to the expert count).
    Fixed(ParallelismPlan),
    /// Best plan per variant from an exhaustive search.
    Autotune(SearchSpace),
}

/// Best (or fixed) plan outcome for one variant at one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct VariantOutcome {
    pub model: String,
    pub feasible: bool,
    pub plan: Option<ParallelismPlan>,
    pub batch_aggregate: u64,
    pub tokens_per_s: Option<f64>,
    pub latency: Option<LatencyBreakdown>,
    /// Failure reasons when infeasible (one per distinct reason).
    pub reasons: Vec<String>,
}

impl VariantOutcome {
    fn from_report(model: &str, report: Option<&PlanReport>, all: &[PlanReport]) -> Self {
        match report.filter(|r| r.feasible) {
            Some(r) => VariantOutcome {
                model: String::from(model),
                feasible: true,
                plan: Some(r.plan),
                batch_aggregate: r.batch_aggregate(),
                tokens_per_s: r.tokens_per_s(),
                latency: r.latency,
                reasons: Vec::new(),
            },
            None => {
                let mut reasons: Vec<String> = Vec::new();
                for r in all {
                    if let Some(reason) = &r.reason {
                        let label = alloc::format!("{}: {}", r.plan, reason);
                        if reasons.len() < 16 {
                            reasons.push(label);
                        }
                    }
                }
                VariantOutcome {
                    model: String::from(model),
                    feasible: false,
                    plan: None,
                    batch_aggregate: 0,
                    tokens_per_s: None,
                    latency: None,
                    reasons,
                }
            }
        }
    }
}

/// Evaluates one variant under `choice`.
pub fn evaluate_variant(
    model: &ModelSpec,
    cluster: &ClusterSpec,
    workload: &WorkloadSpec,
    choice: &PlanChoice,
    calibration: &Calibration,
) -> Result<VariantOutcome> {
    match choice {
        PlanChoice::Fixed(plan) => {
            let report = evaluate_plan(model, &plan.for_model(model), cluster, workload, calibration)?;
            Ok(VariantOutcome::from_report(&model.name, Some(&report), core::slice::from_ref(&report)))
        }
        PlanChoice::Autotune(space) => {
            let result = autotune(model, cluster, workload, space, calibration)?;
            Ok(VariantOutcome::from_report(&model.name, result.best.as_ref(), &result.ranking))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct PairedRow {
    pub model: String,
    pub dense_model: String,
    pub num_gpus: u32,
    pub context_length: u64,
    pub q: f64,
    pub num_experts: u32,
    pub top_k: u32,
    pub s: f64,
    pub qs: f64,
    pub verdict: Verdict,
    pub routing_factor: f64,
    pub dense_params: u64,
    pub moe: VariantOutcome,
    pub dense: VariantOutcome,
    /// Absent when the MoE point is infeasible (rendered as dashes).
    pub reuse: Option<ReuseReport>,
}

pub fn paired_comparison(
    moe: &ModelSpec,
    q: f64,
    cluster: &ClusterSpec,
    workload: &WorkloadSpec,
    choice: &PlanChoice,
    calibration: &Calibration,
) -> Result<PairedRow> {
    let s = sparsity(moe.num_experts, moe.top_k)?;
    let criterion = qs_verdict(q, s)?;
    let dense = synthesize_dense_baseline(moe, q)?;
    let moe_out = evaluate_variant(moe, cluster, workload, choice, calibration)?;
    let dense_out = evaluate_variant(&dense, cluster, workload, choice, calibration)?;
    let reuse = match reuse_gap(moe, &dense, moe_out.batch_aggregate as f64, dense_out.batch_aggregate as f64) {
        Ok(r) => Some(r),
        Err(Error::InfeasibleMoe) => None,
        Err(e) => return Err(e),
    };
    Ok(PairedRow {
        model: moe.name.clone(),
        dense_model: dense.name.clone(),
        num_gpus: cluster.num_gpus,
        context_length: workload.context_length,
        q,
        num_experts: moe.num_experts,
        top_k: moe.top_k,
        s,
        qs: criterion.qs,
        verdict: criterion.verdict,
        routing_factor: moe.num_experts as f64 / moe.top_k as f64,
        dense_params: dense.total_params,
        moe: moe_out,
        dense: dense_out,
        reuse,
    })
}

/// Both variants at one context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct SweepPoint {
    pub context_length: u64,
    pub moe: VariantOutcome,
    pub dense: VariantOutcome,
}

pub fn sweep_point(
    moe: &ModelSpec,
    dense: &ModelSpec,
    cluster: &ClusterSpec,
    context_length: u64,
    choice: &PlanChoice,
    calibration: &Calibration,
) -> Result<SweepPoint> {
    let workload = WorkloadSpec::decode(context_length);
    Ok(SweepPoint {
        context_length,
        moe: evaluate_variant(moe, cluster, &workload, choice, calibration)?,
        dense: evaluate_variant(dense, cluster, &workload, choice, calibration)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct SweepAnchor {
    pub model: String,
    pub context_length: u64,
    pub tokens_per_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct SweepRow {
    pub context_length: u64,
    pub b_moe: u64,
    pub b_dense: u64,
    pub tokens_per_s_moe: Option<f64>,
    pub tokens_per_s_dense: Option<f64>,
    /// Percent of the anchor's throughput.
    pub tput_moe_rel: Option<f64>,
    pub tput_dense_rel: Option<f64>,
    /// `tput_dense_rel / tput_moe_rel`.
    pub speedup: Option<f64>,
    pub moe_plan: Option<ParallelismPlan>,
    pub dense_plan: Option<ParallelismPlan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct SweepResult {
    pub anchor: Option<SweepAnchor>,
    pub rows: Vec<SweepRow>,
    pub points: Vec<SweepPoint>,
}

/// The normalization anchor: MoE throughput at the first point.
pub fn sweep_anchor(first: &SweepPoint) -> Option<SweepAnchor> {
    first.moe.tokens_per_s.map(|t| SweepAnchor { model: first.moe.model.clone(), context_length: first.context_length, tokens_per_s: t })
}

/// One sweep row relative to `anchor`.
pub fn sweep_row(anchor: Option<&SweepAnchor>, p: &SweepPoint) -> SweepRow {
    let rel = |t: Option<f64>| match (anchor, t) {
        (Some(a), Some(t)) => Some(100.0 * (t / a.tokens_per_s)),
        _ => None,
    };
    let (m, d) = (rel(p.moe.tokens_per_s), rel(p.dense.tokens_per_s));
    SweepRow {
        context_length: p.context_length,
        b_moe: p.moe.batch_aggregate,
        b_dense: p.dense.batch_aggregate,
        tokens_per_s_moe: p.moe.tokens_per_s,
        tokens_per_s_dense: p.dense.tokens_per_s,
        tput_moe_rel: m,
        tput_dense_rel: d,
        speedup: match (m, d) {
            (Some(m), Some(d)) => Some(d / m),
            _ => None,
        },
        moe_plan: p.moe.plan,
        dense_plan: p.dense.plan,
    }
}

/// Normalizes evaluated points to the MoE throughput at the first point.
pub fn assemble_sweep(points: Vec<SweepPoint>) -> SweepResult {
    let anchor = points.first().and_then(sweep_anchor);
    let rows = points.iter().map(|p| sweep_row(anchor.as_ref(), p)).collect();
    SweepResult { anchor, rows, points }
}

pub fn context_sweep(
    moe: &ModelSpec,
    q: f64,
    cluster: &ClusterSpec,
    contexts: &[u64],
    choice: &PlanChoice,
    calibration: &Calibration,
) -> Result<SweepResult> {
    check_contexts(contexts)?;
    let dense = synthesize_dense_baseline(moe, q)?;
    let points = contexts
        .iter()
        .map(|&l| sweep_point(moe, &dense, cluster, l, choice, calibration))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble_sweep(points))
}

pub fn check_contexts(contexts: &[u64]) -> Result<()> {
    if contexts.is_empty() {
        return Err(Error::Domain(String::from("a sweep needs at least one context length")));
    }
    if contexts.contains(&0) || contexts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Domain(String::from("context lengths must be positive and strictly ascending")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub enum Component {
    #[serde(rename = "HBM")]
    Hbm,
    #[serde(rename = "Compute")]
    Compute,
    #[serde(rename = "Comm.")]
    Comm,
}

impl Component {
    pub fn label(&self) -> &'static str {
        match self {
            Component::Hbm => "HBM",
            Component::Compute => "Compute",
            Component::Comm => "Comm.",
        }
    }
}

/// Per-token decode time split, in seconds per generated token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct AttributionCosts {
    pub hbm: f64,
    pub compute: f64,
    pub comm: f64,
}

impl AttributionCosts {
    pub fn scaled(&self, unit: f64) -> AttributionCosts {
        AttributionCosts { hbm: self.hbm / unit, compute: self.compute / unit, comm: self.comm / unit }
    }

    fn get(&self, c: Component) -> f64 {
        match c {
            Component::Hbm => self.hbm,
            Component::Compute => self.compute,
            Component::Comm => self.comm,
        }
    }
}

/// Step times amortized over the cluster batch.
pub fn attribution(latency: &LatencyBreakdown, batch_aggregate: u64) -> AttributionCosts {
    let b = batch_aggregate as f64;
    AttributionCosts { hbm: latency.t_hbm / b, compute: latency.t_compute / b, comm: latency.t_comm_exposed / b }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct AttributionRow {
    pub context_length: u64,
    /// Relative units: multiples of the normalization unit.
    pub moe: Option<AttributionCosts>,
    pub dense: Option<AttributionCosts>,
    /// Component with the largest MoE-minus-dense difference.
    pub gap_driver: Option<Component>,
    pub gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct AttributionTable {
    /// Seconds per token equal to one relative unit (MoE compute at the first context).
    pub unit_seconds: Option<f64>,
    pub rows: Vec<AttributionRow>,
}

fn costs_of(v: &VariantOutcome) -> Option<AttributionCosts> {
    v.latency.as_ref().map(|l| attribution(l, v.batch_aggregate))
}

/// Largest MoE-minus-dense component; ties resolve HBM, compute, comm.
pub fn gap_driver(moe: &AttributionCosts, dense: &AttributionCosts) -> (Component, f64) {
    let mut best = (Component::Hbm, moe.hbm - dense.hbm);
    for c in [Component::Compute, Component::Comm] {
        let d = moe.get(c) - dense.get(c);
        if d > best.1 {
            best = (c, d);
        }
    }
    best
}

pub fn attribution_table(points: &[SweepPoint]) -> AttributionTable {
    let unit = points.first().and_then(|p| costs_of(&p.moe)).map(|c| c.compute).filter(|u| *u > 0.0);
    let rows = points
        .iter()
        .map(|p| {
            let scale = |c: Option<AttributionCosts>| match (c, unit) {
                (Some(c), Some(u)) => Some(c.scaled(u)),
                _ => None,
            };
            let (m, d) = (scale(costs_of(&p.moe)), scale(costs_of(&p.dense)));
            let driver = match (&m, &d) {
                (Some(m), Some(d)) => Some(gap_driver(m, d)),
                _ => None,
            };
            AttributionRow { context_length: p.context_length, moe: m, dense: d, gap_driver: driver.map(|x| x.0), gap: driver.map(|x| x.1) }
        })
        .collect();
    AttributionTable { unit_seconds: unit, rows }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct CompareRow {
    pub model: String,
    pub q: f64,
    pub context_length: u64,
    pub b_moe: u64,
    pub b_dense: u64,
    pub moe_feasible: bool,
    pub dense_feasible: bool,
    /// Dense throughput as a percentage of the same row's MoE.
    pub dense_rel_pct: Option<f64>,
    pub point: SweepPoint,
}

/// Dense-q vs MoE at one context, MoE = 100%.
pub fn compare_row(
    moe: &ModelSpec,
    q: f64,
    cluster: &ClusterSpec,
    context_length: u64,
    choice: &PlanChoice,
    calibration: &Calibration,
) -> Result<CompareRow> {
    let dense = synthesize_dense_baseline(moe, q)?;
    let point = sweep_point(moe, &dense, cluster, context_length, choice, calibration)?;
    let dense_rel_pct = match (point.moe.tokens_per_s, point.dense.tokens_per_s) {
        (Some(m), Some(d)) => Some(100.0 * (d / m)),
        _ => None,
    };
    Ok(CompareRow {
        model: moe.name.clone(),
        q,
        context_length,
        b_moe: point.moe.batch_aggregate,
        b_dense: point.dense.batch_aggregate,
        moe_feasible: point.moe.feasible,
        dense_feasible: point.dense.feasible,
        dense_rel_pct,
        point,
    })
}

/// Reference operating point for `num_gpus`: TP up to 8, the rest as the
/// KV-parallel degree, and EP across the KV-parallel ranks (across the TP
/// group when there are none), capped at 8.
pub fn reference_plan(num_gpus: u32) -> ParallelismPlan {
    use crate::specs::KvMode;
    let tp = [8u32, 4, 2, 1].into_iter().find(|t| num_gpus.is_multiple_of(*t)).unwrap_or(1);
    let kv = num_gpus / tp;
    let ep = if kv > 1 { kv.min(8) } else { tp };
    let (kv_mode, kv_degree) = if kv > 1 { (KvMode::Kvp, kv) } else { (KvMode::None, 1) };
    ParallelismPlan { tp, ep, pp: 1, kv_mode, kv_degree, dp: 1 }
}
