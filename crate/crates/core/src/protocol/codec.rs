//! Canonical JSON encoding of spawn and resume packages.
//!
//! Encoding is compact UTF-8 JSON with object keys in the fixed field order
//! below and no trailing newline, so equal packages always produce equal
//! bytes. Decoding checks key sets before typed parsing so that missing and
//! unknown keys surface as distinct errors with their JSON path.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use super::{ResumePackage, SpawnPackage};

pub const SPAWN_KEYS: [&str; 8] = [
    "spawn_id",
    "parent_id",
    "timestamp",
    "memory",
    "skills",
    "context",
    "task",
    "spawn_metrics",
];
pub const MEMORY_KEYS: [&str; 3] = ["episodic", "semantic", "working"];
pub const CONTEXT_KEYS: [&str; 4] = ["repo_path", "current_file", "line_number", "pending_changes"];
pub const TASK_KEYS: [&str; 3] = ["description", "constraints", "expected_outcome"];
pub const SPAWN_METRICS_KEYS: [&str; 6] = ["I_f", "C_c", "F_c", "O_c", "U_c", "S_spawn"];

pub const RESUME_KEYS: [&str; 7] = [
    "spawn_id",
    "status",
    "execution_time",
    "result",
    "trace",
    "skills_learned",
    "metrics",
];
pub const RESULT_KEYS: [&str; 3] = ["output", "code_diff", "files_modified"];
pub const RESUME_METRICS_KEYS: [&str; 3] = ["tokens_used", "api_calls", "test_pass_rate"];

/// Nested objects whose key sets are fixed, as (parent key, keys).
const SPAWN_NESTED: [(&str, &[&str]); 4] = [
    ("memory", &MEMORY_KEYS),
    ("context", &CONTEXT_KEYS),
    ("task", &TASK_KEYS),
    ("spawn_metrics", &SPAWN_METRICS_KEYS),
];
const RESUME_NESTED: [(&str, &[&str]); 2] = [("result", &RESULT_KEYS), ("metrics", &RESUME_METRICS_KEYS)];

#[derive(Debug, Clone, PartialEq)]
pub enum Package {
    Spawn(SpawnPackage),
    Resume(ResumePackage),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("invalid JSON: {0}")]
    Syntax(String),
    #[error("package must be a JSON object")]
    NotAnObject,
    #[error("cannot tell spawn from resume package: {0}")]
    UnknownKind(String),
    #[error("unknown key `{key}` at {path}")]
    UnknownKey { path: String, key: String },
    #[error("missing key `{key}` at {path}")]
    MissingKey { path: String, key: String },
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("value out of range at {path}: {message}")]
    OutOfRange { path: String, message: String },
}

pub fn encode_package(package: &Package) -> Vec<u8> {
    match package {
        Package::Spawn(p) => encode(p),
        Package::Resume(p) => encode(p),
    }
}

impl SpawnPackage {
    pub fn encode(&self) -> Vec<u8> {
        encode(self)
    }
}

impl ResumePackage {
    pub fn encode(&self) -> Vec<u8> {
        encode(self)
    }
}

fn encode<T: Serialize>(value: &T) -> Vec<u8> {
    serde_json::to_vec(value).expect("package types serialize infallibly")
}

/// Parses either package kind, telling them apart by their key sets.
pub fn decode_package(bytes: &[u8]) -> Result<Package, DecodeError> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| DecodeError::Syntax(e.to_string()))?;
    let obj = value.as_object().ok_or(DecodeError::NotAnObject)?;
    let spawn_only = SPAWN_KEYS.iter().any(|k| *k != "spawn_id" && obj.contains_key(*k));
    let resume_only = RESUME_KEYS.iter().any(|k| *k != "spawn_id" && obj.contains_key(*k));
    match (spawn_only, resume_only) {
        (true, false) => decode_spawn_value(value).map(Package::Spawn),
        (false, true) => decode_resume_value(value).map(Package::Resume),
        (true, true) => Err(DecodeError::UnknownKind("keys of both package kinds present".into())),
        (false, false) => Err(DecodeError::UnknownKind("no distinguishing keys present".into())),
    }
}

pub fn decode_spawn(bytes: &[u8]) -> Result<SpawnPackage, DecodeError> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| DecodeError::Syntax(e.to_string()))?;
    decode_spawn_value(value)
}

pub fn decode_resume(bytes: &[u8]) -> Result<ResumePackage, DecodeError> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| DecodeError::Syntax(e.to_string()))?;
    decode_resume_value(value)
}

fn decode_spawn_value(value: Value) -> Result<SpawnPackage, DecodeError> {
    check_keys(&value, "$", &SPAWN_KEYS, &SPAWN_NESTED)?;
    let p: SpawnPackage = typed(value)?;
    check_spawn_ranges(&p)?;
    Ok(p)
}

fn decode_resume_value(value: Value) -> Result<ResumePackage, DecodeError> {
    check_keys(&value, "$", &RESUME_KEYS, &RESUME_NESTED)?;
    let p: ResumePackage = typed(value)?;
    check_resume_ranges(&p)?;
    Ok(p)
}

fn check_keys(value: &Value, path: &str, keys: &[&str], nested: &[(&str, &[&str])]) -> Result<(), DecodeError> {
    let obj = value.as_object().ok_or(DecodeError::NotAnObject)?;
    check_object(obj, path, keys)?;
    for (key, sub_keys) in nested {
        if let Some(Value::Object(sub)) = obj.get(*key) {
            check_object(sub, &format!("{path}.{key}"), sub_keys)?;
        }
    }
    Ok(())
}

fn check_object(obj: &Map<String, Value>, path: &str, keys: &[&str]) -> Result<(), DecodeError> {
    if let Some(k) = obj.keys().find(|k| !keys.contains(&k.as_str())) {
        return Err(DecodeError::UnknownKey {
            path: path.to_string(),
            key: k.clone(),
        });
    }
    if let Some(k) = keys.iter().find(|k| !obj.contains_key(**k)) {
        return Err(DecodeError::MissingKey {
            path: path.to_string(),
            key: k.to_string(),
        });
    }
    Ok(())
}

fn typed<T: DeserializeOwned>(value: Value) -> Result<T, DecodeError> {
    serde_path_to_error::deserialize(value).map_err(|e| DecodeError::Schema {
        path: format!("$.{}", e.path()),
        message: e.inner().to_string(),
    })
}

fn out_of_range(path: &str, message: impl Into<String>) -> DecodeError {
    DecodeError::OutOfRange {
        path: path.to_string(),
        message: message.into(),
    }
}

fn nonneg(path: &str, v: f64) -> Result<(), DecodeError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(out_of_range(path, format!("{v} must be finite and nonnegative")))
    }
}

fn unit(path: &str, v: f64) -> Result<(), DecodeError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(out_of_range(path, format!("{v} must lie in [0, 1]")))
    }
}

fn check_spawn_ranges(p: &SpawnPackage) -> Result<(), DecodeError> {
    nonneg("$.timestamp", p.timestamp)?;
    let m = &p.spawn_metrics;
    nonneg("$.spawn_metrics.I_f", m.interdependency)?;
    nonneg("$.spawn_metrics.C_c", m.cyclomatic)?;
    nonneg("$.spawn_metrics.F_c", m.failure_cascade)?;
    unit("$.spawn_metrics.O_c", m.context_occupancy)?;
    nonneg("$.spawn_metrics.U_c", m.uncertainty)?;
    unit("$.spawn_metrics.S_spawn", m.spawn_score)?;
    for (i, s) in p.skills.iter().enumerate() {
        s.validate()
            .map_err(|e| out_of_range(&format!("$.skills[{i}]"), e.to_string()))?;
    }
    for (i, d) in p.context.pending_changes.iter().enumerate() {
        if !d.is_well_formed() {
            return Err(out_of_range(&format!("$.context.pending_changes[{i}]"), "hunks unsorted or overlapping"));
        }
    }
    Ok(())
}

fn check_resume_ranges(p: &ResumePackage) -> Result<(), DecodeError> {
    nonneg("$.execution_time", p.execution_time)?;
    unit("$.metrics.test_pass_rate", p.metrics.test_pass_rate)?;
    for (i, s) in p.skills_learned.iter().enumerate() {
        s.validate()
            .map_err(|e| out_of_range(&format!("$.skills_learned[{i}]"), e.to_string()))?;
    }
    Ok(())
}
