//! Sparsity, the scaling-law quality multiplier, the `qs` criterion and
//! synthesis of quality-matched dense baselines.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::specs::{FfnKind, ModelSpec};
use crate::{Error, Result};

/// Dense FFN intermediate dimensions are rounded to this multiple.
pub const FFN_DIM_MULTIPLE: u64 = 128;

/// Default `q` for paired comparisons.
pub const DEFAULT_Q: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct ScalingLawParams {
    /// Exponent of the loss-vs-parameters power law, L(N) ∝ N^(−α_N).
    pub alpha_n: f64,
}

impl Default for ScalingLawParams {
    fn default() -> Self {
        ScalingLawParams { alpha_n: 0.076 }
    }
}

/// `s = k / E`.
pub fn sparsity(num_experts: u32, top_k: u32) -> Result<f64> {
    if top_k == 0 || top_k > num_experts {
        return Err(Error::Domain(format!("sparsity requires 1 ≤ k ≤ E, got E = {num_experts}, k = {top_k}")));
    }
    Ok(top_k as f64 / num_experts as f64)
}

/// Dense size multiplier that matches `l_moe`: `(L_base / L_moe)^(1/α_N)`.
///
/// Advisory only: the power law ignores irreducible loss, so callers pass
/// `q` explicitly everywhere else.
pub fn quality_multiplier(l_base: f64, l_moe: f64, params: ScalingLawParams) -> Result<f64> {
    if !(l_base > 0.0 && l_moe > 0.0) || !l_base.is_finite() || !l_moe.is_finite() {
        return Err(Error::Domain(format!("losses must be positive, got L_base = {l_base}, L_moe = {l_moe}")));
    }
    if !(params.alpha_n > 0.0) {
        return Err(Error::Domain(format!("alpha_N must be positive, got {}", params.alpha_n)));
    }
    Ok(libm::pow(l_base / l_moe, 1.0 / params.alpha_n))
}

/// Forward scaling law: loss of a model `multiplier`× larger than the base.
pub fn scaled_loss(l_base: f64, multiplier: f64, params: ScalingLawParams) -> f64 {
    l_base * libm::pow(multiplier, -params.alpha_n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    MoeDisadvantaged,
    MoeAdvantaged,
    Boundary,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::MoeDisadvantaged => "moe_disadvantaged",
            Verdict::MoeAdvantaged => "moe_advantaged",
            Verdict::Boundary => "boundary",
        }
    }
}

/// `qs` values this close to 1 are reported as the boundary.
const BOUNDARY_TOL: f64 = 4.0 * f64::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct QsVerdict {
    pub s: f64,
    pub q: f64,
    pub qs: f64,
    pub verdict: Verdict,
    /// Per-token FFN weight traffic of the MoE relative to the dense baseline, 1/(qs).
    pub ffn_traffic_ratio: f64,
}

pub fn qs_verdict(q: f64, s: f64) -> Result<QsVerdict> {
    if !(q >= 0.0 && q.is_finite()) {
        return Err(Error::Domain(format!("q must be finite and ≥ 0, got {q}")));
    }
    if !(s > 0.0 && s <= 1.0) {
        return Err(Error::Domain(format!("s must lie in (0, 1], got {s}")));
    }
    let qs = q * s;
    let verdict = if (qs - 1.0).abs() <= BOUNDARY_TOL {
        Verdict::Boundary
    } else if qs < 1.0 {
        Verdict::MoeDisadvantaged
    } else {
        Verdict::MoeAdvantaged
    };
    Ok(QsVerdict { s, q, qs, verdict, ffn_traffic_ratio: 1.0 / qs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct QsReport {
    #[serde(flatten)]
    pub criterion: QsVerdict,
    /// q·s·X, the parameter count the baseline aims for.
    pub dense_target_params: f64,
    /// Parameter count after rounding the FFN dimension.
    pub dense_achieved_params: u64,
    pub dense_baseline: ModelSpec,
}

pub fn qs_report(moe: &ModelSpec, q: f64) -> Result<QsReport> {
    let criterion = qs_verdict(q, sparsity(moe.num_experts, moe.top_k)?)?;
    let dense = synthesize_dense_baseline(moe, q)?;
    Ok(QsReport {
        criterion,
        dense_target_params: q * criterion.s * moe.total_params as f64,
        dense_achieved_params: dense.total_params,
        dense_baseline: dense,
    })
}

/// Dense model with `q·s·X` parameters, same attention/KV configuration and
/// layer count as `moe`; only the FFN intermediate dimension changes.
///
/// A dense input with `q = 1` is returned unchanged.
pub fn synthesize_dense_baseline(moe: &ModelSpec, q: f64) -> Result<ModelSpec> {
    if !(q > 0.0 && q.is_finite()) {
        return Err(Error::Domain(format!("q must be positive, got {q}")));
    }
    if moe.ffn_kind == FfnKind::Dense && q == 1.0 {
        return Ok(moe.clone());
    }
    let s = sparsity(moe.num_experts, moe.top_k)?;
    let target = q * s * moe.total_params as f64;
    let layers = moe.num_layers as f64;
    let fixed = layers * moe.attn_params_per_layer as f64 + moe.embedding_params as f64;
    let per_row = moe.ffn_projections as u64 * moe.d_model as u64;
    let ffn_per_layer = (target - fixed) / layers;
    let hidden_units = libm::round(ffn_per_layer / (per_row as f64 * FFN_DIM_MULTIPLE as f64));
    if !(hidden_units >= 1.0) {
        return Err(Error::DegenerateBaseline { qs: q * s });
    }
    let hidden = hidden_units as u64 * FFN_DIM_MULTIPLE;
    let hidden_u32 = u32::try_from(hidden)
        .map_err(|_| Error::Domain(format!("dense FFN dimension {hidden} overflows")))?;
    let ffn_params = hidden * per_row;
    let total = moe.num_layers as u64 * (moe.attn_params_per_layer + ffn_params) + moe.embedding_params;
    Ok(ModelSpec {
        name: dense_name(&moe.name, q),
        ffn_kind: FfnKind::Dense,
        num_experts: 1,
        top_k: 1,
        ffn_hidden_dim: hidden_u32,
        ffn_params_per_layer: ffn_params,
        total_params: total,
        active_params: total,
        ..moe.clone()
    })
}

fn dense_name(base: &str, q: f64) -> String {
    if q == libm::round(q) {
        format!("{base}-dense-q{}", q as i64)
    } else {
        format!("{base}-dense-q{q}")
    }
}

/// One literature row: expert configuration and the quoted q range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct Table1Entry {
    pub name: String,
    pub num_experts: u32,
    pub top_k: u32,
    pub q_lo: f64,
    pub q_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct Table1Row {
    pub name: String,
    pub num_experts: u32,
    pub top_k: u32,
    pub s: f64,
    pub q_lo: f64,
    pub q_hi: f64,
    pub qs_lo: f64,
    pub qs_hi: f64,
}

/// Published MoE systems and the quality factors quoted for them.
pub fn builtin_table1_entries() -> Vec<Table1Entry> {
    let row = |name: &str, e, k, lo, hi| Table1Entry { name: String::from(name), num_experts: e, top_k: k, q_lo: lo, q_hi: hi };
    alloc::vec![
        row("DeepSpeed-MoE", 128, 1, 4.0, 5.0),
        row("GLaM", 64, 2, 4.0, 6.0),
        row("GShard", 128, 2, 5.0, 6.0),
        row("Switch-C", 2048, 1, 3.0, 3.0),
        row("ST-MoE", 64, 2, 3.0, 3.0),
    ]
}

pub fn table1_report(entries: &[Table1Entry]) -> Result<Vec<Table1Row>> {
    entries
        .iter()
        .map(|e| {
            if !(e.q_lo >= 0.0 && e.q_lo <= e.q_hi) {
                return Err(Error::Domain(format!("{}: q range must satisfy 0 ≤ lo ≤ hi", e.name)));
            }
            let s = sparsity(e.num_experts, e.top_k)?;
            Ok(Table1Row {
                name: e.name.clone(),
                num_experts: e.num_experts,
                top_k: e.top_k,
                s,
                q_lo: e.q_lo,
                q_hi: e.q_hi,
                qs_lo: e.q_lo * s,
                qs_hi: e.q_hi * s,
            })
        })
        .collect()
}
