//! JSON Schema documents for config files and service payloads.

use std::fs;
use std::path::Path;

use qsmodel_core::autotune::AutotuneResult;
use qsmodel_core::report::{PairedRow, SweepResult};
use schemars::{schema_for, Schema};

use crate::config::{CalibrationFile, ClusterFile, HardwareFile, ModelFile};
use crate::eval::ModelSummary;
use crate::service;

/// (file stem, schema), in a stable order.
pub fn all() -> Vec<(&'static str, Schema)> {
    let mut out = vec![
        ("model", schema_for!(ModelFile)),
        ("hardware", schema_for!(HardwareFile)),
        ("cluster", schema_for!(ClusterFile)),
        ("calibration", schema_for!(CalibrationFile)),
        ("models-response", schema_for!(Vec<ModelSummary>)),
        ("pair-response", schema_for!(Vec<PairedRow>)),
        ("sweep-response", schema_for!(SweepResult)),
        ("autotune-response", schema_for!(AutotuneResult)),
    ];
    out.extend(service::schemas());
    out
}

pub fn render(schema: &Schema) -> String {
    serde_json::to_string_pretty(schema).expect("schemas serialize") + "\n"
}

/// Writes `<stem>.schema.json` for every schema into `dir`.
pub fn write_all(dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    for (stem, schema) in all() {
        fs::write(dir.join(format!("{stem}.schema.json")), render(&schema))?;
    }
    Ok(())
}
