//! Run configuration: defaults, then the JSON file, then flags.

use std::path::{Path, PathBuf};

use krt_core::datagen::GenSpec;
use krt_core::ica::IcaConfig;
use krt_core::protocol::{ModelConfig, ProtocolConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Either a directory holding `train.mlds` and `test.mlds`, or a generator
/// spec. `seed` overrides the run seed for generation only, so arms trained
/// with different seeds can share one dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub generate: GenSpec,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub precision: Precision,
    pub out: PathBuf,
    pub protocol: ProtocolConfig,
}

/// Desk-scale reference protocol: 20 synthetic classes in four sessions of
/// five, ten epochs, d = l = 32 with four heads.
pub fn reference_protocol() -> ProtocolConfig {
    ProtocolConfig {
        base: 0,
        inc: 5,
        epochs: 10,
        model: ModelConfig {
            ica: IcaConfig::desk(32, 4),
            ..ModelConfig::default()
        },
        ..ProtocolConfig::default()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            precision: Precision::F32,
            out: PathBuf::from("krt-out"),
            protocol: reference_protocol(),
        }
    }
}

impl RunConfig {
    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: krt_core::Error| CliError::Config(e.to_string());
        self.protocol.validate().map_err(cfg)?;
        if self.data.dir.is_none() {
            self.data.generate.validate().map_err(cfg)?;
        }
        Ok(())
    }
}

fn path_error<E: std::fmt::Display>(e: serde_path_to_error::Error<E>) -> CliError {
    let path = e.path().to_string();
    if path == "." {
        CliError::Config(e.inner().to_string())
    } else {
        CliError::Config(format!("{path}: {}", e.inner()))
    }
}

pub fn parse_json(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(path_error)
}

pub fn read_file(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// `key.path=value`; the value is read as JSON when it parses, else as a string.
pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("`{s}` is not key=value")))?;
    let k = k.trim();
    if k.is_empty() || k.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("bad key in `{s}`")));
    }
    let v = serde_json::from_str(v.trim()).unwrap_or_else(|_| Value::String(v.trim().to_string()));
    Ok((k.to_string(), v))
}

fn assign(root: &mut Value, key: &str, value: Value) {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
        let map = node.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return;
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
}

/// Applies assignments in order over `base` and re-validates the schema.
pub fn apply(base: &RunConfig, sets: &[(String, Value)]) -> Result<RunConfig> {
    let mut v = serde_json::to_value(base).map_err(|e| CliError::Runtime(e.to_string()))?;
    for (k, val) in sets {
        assign(&mut v, k, val.clone());
    }
    serde_path_to_error::deserialize(v).map_err(path_error)
}

/// Defaults, then `file`, then `sets`; the result is validated.
pub fn resolve(file: Option<&Path>, sets: &[(String, Value)]) -> Result<RunConfig> {
    let base = match file {
        Some(p) => read_file(p)?,
        None => RunConfig::default(),
    };
    let cfg = apply(&base, sets)?;
    cfg.validate()?;
    Ok(cfg)
}
