use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A spec or argument breaks one of its documented invariants.
    #[error("invariant violated for {field}: {reason}")]
    Invalid { field: &'static str, reason: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("plan factorization mismatch: tp·pp·kv·dp = {product} but the cluster has {num_gpus} GPUs")]
    PlanMismatch { product: u64, num_gpus: u32 },

    #[error("infeasible hardware: per-GPU HBM budget {budget_bytes} bytes is not positive")]
    NonPositiveBudget { budget_bytes: f64 },

    #[error("degenerate dense baseline: q·s = {qs} rounds the FFN intermediate dimension to zero")]
    DegenerateBaseline { qs: f64 },

    #[error("MoE point is infeasible (B_moe = 0); reuse gap is undefined")]
    InfeasibleMoe,

    #[error("no valid plan: {0}")]
    NoValidPlan(String),
}

pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    Error::Invalid { field, reason: reason.into() }
}
