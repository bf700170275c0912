//! Analytical decode-stage cost model comparing mixture-of-experts models
//! with quality-matched dense baselines.
//!
//! The crate is `no_std` (with `alloc`) and contains only arithmetic: spec
//! types, the `qs` criterion, HBM capacity, weight reuse, the collective
//! communication model, roofline latency, the parallelism autotuner and the
//! table generators. File formats, the CLI and the HTTP service live in the
//! `qsmodel` companion crate.

#![no_std]
// `!(x > 0.0)` guards deliberately reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod autotune;
pub mod calibration;
pub mod comm;
mod error;
pub mod latency;
pub mod memory;
pub mod qs;
pub mod report;
pub mod reuse;
pub mod specs;

pub use calibration::Calibration;
pub use error::Error;

pub type Result<T> = core::result::Result<T, Error>;

/// Bytes in a decimal gigabyte, the unit used for HBM capacities.
pub const GB: f64 = 1e9;
