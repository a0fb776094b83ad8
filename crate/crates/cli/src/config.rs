//! JSON configs layered as defaults < file < command-line overrides.

use std::fmt;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable or invalid config, missing inputs.
    Usage(String),
    /// The run finished but missed an acceptance threshold.
    Threshold(String),
    /// The run itself failed.
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Threshold(_) | CliError::Run(_) => 1,
            CliError::Usage(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Threshold(m) => write!(f, "threshold not met: {m}"),
            CliError::Run(m) => write!(f, "run failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<snn_core::Error> for CliError {
    fn from(e: snn_core::Error) -> Self {
        match e {
            snn_core::Error::InvalidArgument(_) | snn_core::Error::DimensionMismatch { .. } | snn_core::Error::GridMismatch(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Run(e.to_string()),
        }
    }
}

/// An experiment's configuration type.
pub trait ExperimentConfig: Serialize + DeserializeOwned + Default {
    /// Dotted path that `--seed` writes to.
    const SEED_PATH: &'static str = "seed";
}

/// Recursive merge. Objects merge key by key, except tagged enums whose
/// `kind` changes, which are replaced whole so stale variant fields vanish.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            let kind_changes = matches!((b.get("kind"), o.get("kind")), (Some(x), Some(y)) if x != y);
            if kind_changes {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Set `a.b.c = value`, creating intermediate objects.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("bad override key '{path}'")));
    }
    for (i, p) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Usage(format!("'{}' is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            let mut slot = obj.remove(*p).unwrap_or(Value::Null);
            merge(&mut slot, value);
            obj.insert((*p).to_string(), slot);
            return Ok(());
        }
        cur = obj.entry((*p).to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("path has at least one part")
}

/// Parse `key=value`; the value is JSON if it parses, a string otherwise.
pub fn parse_override(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override '{s}' is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

pub fn load_config<T: ExperimentConfig>(path: Option<&Path>, seed: Option<u64>, overrides: &[String]) -> Result<T, CliError> {
    let mut v = serde_json::to_value(T::default()).map_err(|e| CliError::Run(e.to_string()))?;
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?;
        let file: Value = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
        if !file.is_object() {
            return Err(CliError::Usage(format!("{}: config must be a JSON object", p.display())));
        }
        merge(&mut v, file);
    }
    if let Some(s) = seed {
        set_path(&mut v, T::SEED_PATH, Value::from(s))?;
    }
    for o in overrides {
        let (k, val) = parse_override(o)?;
        set_path(&mut v, &k, val)?;
    }
    serde_json::from_value(v).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
}
