//! JSON config files: models, hardware, clusters and calibrations.
//!
//! Every document carries a mandatory `schema_version`; parse errors report
//! the JSON path of the offending field.

use std::fs;
use std::path::{Path, PathBuf};

use qsmodel_core::specs::{ClusterSpec, HardwareSpec, ModelSpec};
use qsmodel_core::Calibration;
use schemars::JsonSchema;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: schema error at `{field}`: {message}")]
    Schema { path: String, field: String, message: String },
    #[error("{path}: unsupported schema_version {found} (expected {SCHEMA_VERSION})")]
    Version { path: String, found: u32 },
    #[error("{path}: {source}")]
    Validation { path: String, source: qsmodel_core::Error },
    #[error("unknown built-in {kind} `{id}` (known: {known})")]
    UnknownBuiltin { kind: &'static str, id: String, known: String },
}

/// Where a number came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SourceNote {
    pub fields: Vec<String>,
    pub url: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema_version: u32,
    pub id: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub comment: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<SourceNote>,
    pub model: ModelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct HardwareFile {
    pub schema_version: u32,
    pub id: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub comment: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<SourceNote>,
    pub hardware: HardwareSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ClusterFile {
    pub schema_version: u32,
    pub id: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub comment: String,
    pub cluster: ClusterSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CalibrationFile {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub comment: String,
    pub calibration: Calibration,
    /// Free-form record of how the knobs were fitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<serde_json::Value>,
}

trait Versioned {
    fn version(&self) -> u32;
    fn check(&self) -> Result<(), qsmodel_core::Error>;
}

impl Versioned for ModelFile {
    fn version(&self) -> u32 {
        self.schema_version
    }
    fn check(&self) -> Result<(), qsmodel_core::Error> {
        self.model.validate().map(|_| ())
    }
}

impl Versioned for HardwareFile {
    fn version(&self) -> u32 {
        self.schema_version
    }
    fn check(&self) -> Result<(), qsmodel_core::Error> {
        self.hardware.validate()
    }
}

impl Versioned for ClusterFile {
    fn version(&self) -> u32 {
        self.schema_version
    }
    fn check(&self) -> Result<(), qsmodel_core::Error> {
        self.cluster.validate()
    }
}

impl Versioned for CalibrationFile {
    fn version(&self) -> u32 {
        self.schema_version
    }
    fn check(&self) -> Result<(), qsmodel_core::Error> {
        self.calibration.validate()
    }
}

/// Deserializes `text`, reporting the JSON path of any schema error.
pub fn from_json_str<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Schema {
        path: origin.to_string(),
        field: display_path(&e.path().to_string()),
        message: e.into_inner().to_string(),
    })
}

fn display_path(p: &str) -> String {
    if p.is_empty() || p == "." {
        "<root>".to_string()
    } else {
        p.to_string()
    }
}

fn parse_checked<T: DeserializeOwned + Versioned>(text: &str, origin: &str) -> Result<T, ConfigError> {
    let doc: T = from_json_str(text, origin)?;
    if doc.version() != SCHEMA_VERSION {
        return Err(ConfigError::Version { path: origin.to_string(), found: doc.version() });
    }
    doc.check().map_err(|source| ConfigError::Validation { path: origin.to_string(), source })?;
    Ok(doc)
}

fn read(path: &Path) -> Result<String, ConfigError> {
    fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })
}

pub fn parse_model_file(text: &str, origin: &str) -> Result<ModelFile, ConfigError> {
    parse_checked(text, origin)
}

pub fn load_model_file(path: &Path) -> Result<ModelFile, ConfigError> {
    parse_model_file(&read(path)?, &path.display().to_string())
}

/// Reads and validates a model config.
pub fn load_model_spec(path: &Path) -> Result<ModelSpec, ConfigError> {
    load_model_file(path).map(|f| f.model)
}

/// Writes `spec` as a model config that [`load_model_spec`] reads back unchanged.
pub fn write_model_spec(path: &Path, id: &str, spec: &ModelSpec) -> Result<(), ConfigError> {
    let file = ModelFile { schema_version: SCHEMA_VERSION, id: id.to_string(), comment: String::new(), sources: Vec::new(), model: spec.clone() };
    let text = serde_json::to_string_pretty(&file).expect("model specs serialize");
    fs::write(path, text + "\n").map_err(|source| ConfigError::Io { path: path.display().to_string(), source })
}

pub fn parse_hardware_file(text: &str, origin: &str) -> Result<HardwareFile, ConfigError> {
    parse_checked(text, origin)
}

pub fn load_hardware(path: &Path) -> Result<HardwareSpec, ConfigError> {
    parse_hardware_file(&read(path)?, &path.display().to_string()).map(|f| f.hardware)
}

pub fn parse_cluster_file(text: &str, origin: &str) -> Result<ClusterFile, ConfigError> {
    parse_checked(text, origin)
}

pub fn load_cluster(path: &Path) -> Result<ClusterSpec, ConfigError> {
    parse_cluster_file(&read(path)?, &path.display().to_string()).map(|f| f.cluster)
}

pub fn parse_calibration_file(text: &str, origin: &str) -> Result<CalibrationFile, ConfigError> {
    parse_checked(text, origin)
}

pub fn load_calibration(path: &Path) -> Result<Calibration, ConfigError> {
    parse_calibration_file(&read(path)?, &path.display().to_string()).map(|f| f.calibration)
}

const BUILTIN_MODELS: [(&str, &str); 5] = [
    ("deepseek-v3", include_str!("../configs/models/deepseek-v3.json")),
    ("grok-1", include_str!("../configs/models/grok-1.json")),
    ("llama-2-70b", include_str!("../configs/models/llama-2-70b.json")),
    ("qwen3-235b-a22b", include_str!("../configs/models/qwen3-235b-a22b.json")),
    ("switch-c-2048", include_str!("../configs/models/switch-c-2048.json")),
];

const BUILTIN_HARDWARE: &str = include_str!("../configs/hardware/reference-180gb.json");
const BUILTIN_CALIBRATION: &str = include_str!("../configs/calibration/default.json");

/// Ids of the shipped model configs, sorted.
pub fn builtin_model_ids() -> Vec<&'static str> {
    BUILTIN_MODELS.iter().map(|(id, _)| *id).collect()
}

pub fn builtin_model_files() -> Vec<ModelFile> {
    BUILTIN_MODELS
        .iter()
        .map(|(id, text)| parse_model_file(text, &format!("builtin:{id}")).expect("shipped model configs are valid"))
        .collect()
}

pub fn builtin_model(id: &str) -> Result<ModelSpec, ConfigError> {
    BUILTIN_MODELS
        .iter()
        .find(|(k, _)| *k == id)
        .map(|(k, text)| parse_model_file(text, &format!("builtin:{k}")).map(|f| f.model))
        .unwrap_or_else(|| {
            Err(ConfigError::UnknownBuiltin { kind: "model", id: id.to_string(), known: builtin_model_ids().join(", ") })
        })
}

pub fn builtin_hardware() -> HardwareSpec {
    parse_hardware_file(BUILTIN_HARDWARE, "builtin:reference-180gb").expect("shipped hardware config is valid").hardware
}

pub fn builtin_calibration_file() -> CalibrationFile {
    parse_calibration_file(BUILTIN_CALIBRATION, "builtin:calibration").expect("shipped calibration is valid")
}

/// The committed calibration every table is generated with.
pub fn builtin_calibration() -> Calibration {
    builtin_calibration_file().calibration
}

/// A built-in id, or a path to a model config.
pub fn resolve_model(id_or_path: &str) -> Result<ModelSpec, ConfigError> {
    if builtin_model_ids().contains(&id_or_path) {
        return builtin_model(id_or_path);
    }
    let path = Path::new(id_or_path);
    if path.exists() || id_or_path.ends_with(".json") || id_or_path.contains(std::path::MAIN_SEPARATOR) {
        return load_model_spec(path);
    }
    Err(ConfigError::UnknownBuiltin { kind: "model", id: id_or_path.to_string(), known: builtin_model_ids().join(", ") })
}

/// Loads every `*.json` model config in `dir`, skipping (and reporting)
/// files that fail to parse or validate.
pub fn load_model_dir(dir: &Path) -> Result<(Vec<ModelFile>, Vec<ConfigError>), ConfigError> {
    let entries = fs::read_dir(dir).map_err(|source| ConfigError::Io { path: dir.display().to_string(), source })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let (mut ok, mut bad) = (Vec::new(), Vec::new());
    for p in paths {
        match load_model_file(&p) {
            Ok(f) => ok.push(f),
            Err(e) => bad.push(e),
        }
    }
    Ok((ok, bad))
}
