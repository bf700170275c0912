//! Evaluation entry points shared by the CLI and the HTTP service, so both
//! produce the same values for the same inputs.

use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use qsmodel_core::autotune::{autotune, evaluate_plan, AutotuneResult, PlanReport, SearchSpace};
use qsmodel_core::qs::{builtin_table1_entries, qs_report, sparsity, synthesize_dense_baseline, table1_report, QsReport, Table1Row};
use qsmodel_core::report::{
    assemble_sweep, attribution_table, check_contexts, compare_row, paired_comparison, reference_plan, sweep_point,
    AttributionTable, CompareRow, PairedRow, PlanChoice, SweepPoint, SweepResult,
};
use qsmodel_core::specs::{ClusterSpec, HardwareSpec, ModelSpec, ParallelismPlan, WorkloadSpec};
use qsmodel_core::{Calibration, Result};

use crate::config::builtin_model;

/// Context lengths of the DeepSeek-V3 throughput sweep.
pub const SWEEP_CONTEXTS: [u64; 7] = [1 << 10, 1 << 14, 1 << 15, 1 << 17, 1 << 20, 1 << 22, 1 << 24];
/// Short and long contexts of the attribution table.
pub const ATTRIBUTION_CONTEXTS: [u64; 2] = [1 << 10, 1 << 17];
pub const DEFAULT_CONTEXT: u64 = 1 << 17;
pub const DEFAULT_GPUS: u32 = 64;

/// A cluster of `num_gpus` × `hardware` under `calibration`'s memory deductions.
pub fn cluster(hardware: &HardwareSpec, num_gpus: u32, calibration: &Calibration) -> Result<ClusterSpec> {
    let c = calibration.apply(&ClusterSpec { hardware: hardware.clone(), num_gpus, reserve_bytes: 0.0, misc_bytes: 0.0, safety_fraction: 0.0 });
    c.validate()?;
    Ok(c)
}

/// How a subcommand picks plans when none is given.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefaultPlan {
    Reference,
    Autotune,
}

pub fn plan_choice(explicit: Option<ParallelismPlan>, default: DefaultPlan, num_gpus: u32) -> PlanChoice {
    match (explicit, default) {
        (Some(p), _) => PlanChoice::Fixed(p),
        (None, DefaultPlan::Reference) => PlanChoice::Fixed(reference_plan(num_gpus)),
        (None, DefaultPlan::Autotune) => PlanChoice::Autotune(SearchSpace::default()),
    }
}

pub fn table1() -> Result<Vec<Table1Row>> {
    table1_report(&builtin_table1_entries())
}

pub fn qs_reports(models: &[ModelSpec], qs: &[f64]) -> Result<Vec<QsReport>> {
    models.iter().flat_map(|m| qs.iter().map(move |&q| qs_report(m, q))).collect()
}

/// One paired row per (model, q), in input order.
pub fn pair_rows(
    models: &[ModelSpec],
    qs: &[f64],
    cluster: &ClusterSpec,
    context_length: u64,
    choice: &PlanChoice,
    calibration: &Calibration,
) -> Result<Vec<PairedRow>> {
    let workload = WorkloadSpec::decode(context_length);
    let jobs: Vec<(&ModelSpec, f64)> = models.iter().flat_map(|m| qs.iter().map(move |&q| (m, q))).collect();
    jobs.par_iter().map(|(m, q)| paired_comparison(m, *q, cluster, &workload, choice, calibration)).collect()
}

/// (model id, GPUs, q) of the shipped paired-reuse rows.
pub const BUILTIN_PAIRS: [(&str, u32, f64); 7] = [
    ("qwen3-235b-a22b", 64, 5.0),
    ("deepseek-v3", 32, 5.0),
    ("deepseek-v3", 64, 5.0),
    ("grok-1", 64, 5.0),
    ("grok-1", 64, 3.0),
    ("grok-1", 64, 2.0),
    ("switch-c-2048", 64, 5.0),
];

/// The shipped paired-reuse table at the reference plan of each row's cluster.
pub fn builtin_pair_rows(hardware: &HardwareSpec, context_length: u64, calibration: &Calibration) -> anyhow::Result<Vec<PairedRow>> {
    let workload = WorkloadSpec::decode(context_length);
    BUILTIN_PAIRS
        .par_iter()
        .map(|&(id, gpus, q)| {
            let model = builtin_model(id)?;
            let c = cluster(hardware, gpus, calibration)?;
            Ok(paired_comparison(&model, q, &c, &workload, &PlanChoice::Fixed(reference_plan(gpus)), calibration)?)
        })
        .collect()
}

/// Sweep points evaluated in parallel, assembled in context order.
pub fn sweep(
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
        .par_iter()
        .map(|&l| sweep_point(moe, &dense, cluster, l, choice, calibration))
        .collect::<Result<Vec<SweepPoint>>>()?;
    Ok(assemble_sweep(points))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct AttributionReport {
    pub model: String,
    pub dense_model: String,
    pub num_gpus: u32,
    pub table: AttributionTable,
    pub points: Vec<SweepPoint>,
}

pub fn attribution(
    moe: &ModelSpec,
    q: f64,
    cluster: &ClusterSpec,
    contexts: &[u64],
    choice: &PlanChoice,
    calibration: &Calibration,
) -> Result<AttributionReport> {
    let result = sweep(moe, q, cluster, contexts, choice, calibration)?;
    Ok(AttributionReport {
        model: moe.name.clone(),
        dense_model: synthesize_dense_baseline(moe, q)?.name,
        num_gpus: cluster.num_gpus,
        table: attribution_table(&result.points),
        points: result.points,
    })
}

pub fn compare_rows(
    models: &[ModelSpec],
    qs: &[f64],
    cluster: &ClusterSpec,
    context_length: u64,
    choice: &PlanChoice,
    calibration: &Calibration,
) -> Result<Vec<CompareRow>> {
    let jobs: Vec<(&ModelSpec, f64)> = models.iter().flat_map(|m| qs.iter().map(move |&q| (m, q))).collect();
    jobs.par_iter().map(|(m, q)| compare_row(m, *q, cluster, context_length, choice, calibration)).collect()
}

/// (model id, q) of the shipped 128k comparison rows.
pub const BUILTIN_COMPARE: [(&str, f64); 5] =
    [("qwen3-235b-a22b", 5.0), ("grok-1", 5.0), ("grok-1", 3.0), ("grok-1", 2.0), ("switch-c-2048", 5.0)];

pub fn builtin_compare_rows(cluster: &ClusterSpec, context_length: u64, choice: &PlanChoice, calibration: &Calibration) -> anyhow::Result<Vec<CompareRow>> {
    BUILTIN_COMPARE
        .par_iter()
        .map(|&(id, q)| Ok(compare_row(&builtin_model(id)?, q, cluster, context_length, choice, calibration)?))
        .collect()
}

pub fn autotune_model(
    model: &ModelSpec,
    cluster: &ClusterSpec,
    context_length: u64,
    space: &SearchSpace,
    calibration: &Calibration,
) -> Result<AutotuneResult> {
    autotune(model, cluster, &WorkloadSpec::decode(context_length), space, calibration)
}

/// One plan (EP clamped to the model) at one context.
pub fn feasible(model: &ModelSpec, plan: &ParallelismPlan, cluster: &ClusterSpec, context_length: u64, calibration: &Calibration) -> Result<PlanReport> {
    evaluate_plan(model, &plan.for_model(model), cluster, &WorkloadSpec::decode(context_length), calibration)
}

/// Compact listing entry for a model config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ModelSummary {
    pub id: String,
    pub name: String,
    pub ffn_kind: qsmodel_core::specs::FfnKind,
    pub num_experts: u32,
    pub top_k: u32,
    pub s: f64,
    pub kv_layout: qsmodel_core::specs::KvKind,
    pub num_layers: u32,
    pub total_params: u64,
    pub active_params: u64,
}

pub fn summarize(id: &str, m: &ModelSpec) -> ModelSummary {
    ModelSummary {
        id: id.to_string(),
        name: m.name.clone(),
        ffn_kind: m.ffn_kind,
        num_experts: m.num_experts,
        top_k: m.top_k,
        s: sparsity(m.num_experts, m.top_k).unwrap_or(f64::NAN),
        kv_layout: m.kv_layout.kind,
        num_layers: m.num_layers,
        total_params: m.total_params,
        active_params: m.active_params,
    }
}
