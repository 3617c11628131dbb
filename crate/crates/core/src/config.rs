//! Run configuration: one TOML file with a section per module, plus
//! command-line overrides of any key.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::kgdata::SplitPaths;
use crate::model::{FusionConfig, ModelConfig};
use crate::sampling::EgnsConfig;
use crate::scoring::Norm;
use crate::train::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("invalid value for '{key}': {message}")]
    InvalidValue { key: String, message: String },
}

impl ConfigError {
    /// The configuration key the error is about, if any.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::UnknownKey(k) | ConfigError::InvalidValue { key: k, .. } => Some(k),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    /// Let valid/test introduce entities and relations absent from train.
    pub allow_unseen: bool,
    /// Modality name → feature file.
    pub modalities: BTreeMap<String, PathBuf>,
}

impl DataConfig {
    pub fn split_paths(&self) -> SplitPaths {
        SplitPaths {
            train: self.train.clone(),
            valid: self.valid.clone(),
            test: self.test.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub norm: Norm,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub kgdata: DataConfig,
    pub fusion: FusionConfig,
    pub scoring: ScoringConfig,
    pub sampling: EgnsConfig,
    pub trainer: TrainConfig,
}

/// Tables whose keys are free-form names rather than settings.
const OPEN_TABLES: &[&str] = &["kgdata.modalities"];

fn defaults() -> toml::Table {
    match Value::try_from(RunConfig::default()).expect("default config serializes") {
        Value::Table(t) => t,
        _ => unreachable!("config serializes to a table"),
    }
}

/// Rejects keys of `user` that the default configuration does not have.
fn check_keys(user: &toml::Table, reference: &toml::Table, prefix: &str) -> Result<(), ConfigError> {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let Some(expected) = reference.get(k) else {
            return Err(ConfigError::UnknownKey(path));
        };
        match (v, expected) {
            (Value::Table(u), Value::Table(r)) if !OPEN_TABLES.contains(&path.as_str()) => check_keys(u, r, &path)?,
            (Value::Table(_), Value::Table(_)) => {}
            (Value::Table(_), _) => return Err(ConfigError::UnknownKey(path)),
            _ => {}
        }
    }
    Ok(())
}

/// Every settable key as `(dotted path, default value)`.
fn leaves(table: &toml::Table, prefix: &str, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) if !OPEN_TABLES.contains(&path.as_str()) => leaves(t, &path, out),
            _ => out.push((path, v.clone())),
        }
    }
}

fn kebab(path: &str) -> String {
    path.replace(['.', '_'], "-")
}

/// Maps a `--flag` name to a dotted key path. Accepted spellings are the
/// kebab-case full path (`trainer-max-epochs`), the kebab-case leaf when it
/// is unique (`max-epochs`), and `kgdata-modalities-<name>` for modality
/// files.
pub fn resolve_flag(flag: &str) -> Result<String, ConfigError> {
    let mut keys = Vec::new();
    leaves(&defaults(), "", &mut keys);
    if let Some((path, _)) = keys.iter().find(|(p, _)| kebab(p) == flag) {
        return Ok(path.clone());
    }
    for open in OPEN_TABLES {
        if let Some(name) = flag.strip_prefix(&format!("{}-", kebab(open))) {
            if !name.is_empty() {
                return Ok(format!("{open}.{name}"));
            }
        }
    }
    let by_leaf: Vec<&String> = keys
        .iter()
        .map(|(p, _)| p)
        .filter(|p| kebab(p.rsplit('.').next().unwrap_or(p)) == flag)
        .collect();
    match by_leaf.as_slice() {
        [one] => Ok((*one).clone()),
        [] => Err(ConfigError::UnknownKey(flag.to_string())),
        many => Err(ConfigError::InvalidValue {
            key: flag.to_string(),
            message: format!(
                "ambiguous, use one of {}",
                many.iter().map(|p| format!("--{}", kebab(p))).collect::<Vec<_>>().join(", ")
            ),
        }),
    }
}

/// Parses `--key value`, `--key=value` and bare `--flag` (meaning `true`)
/// into `(dotted key, raw value)` pairs.
pub fn parse_override_args(args: &[String]) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let Some(flag) = args[i].strip_prefix("--") else {
            return Err(ConfigError::Parse(format!("expected a --flag, found '{}'", args[i])));
        };
        let (name, value) = match flag.split_once('=') {
            Some((n, v)) => (n, v.to_string()),
            None => match args.get(i + 1) {
                Some(next) if !next.starts_with("--") => {
                    i += 1;
                    (flag, next.clone())
                }
                _ => (flag, "true".to_string()),
            },
        };
        out.push((resolve_flag(name)?, value));
        i += 1;
    }
    Ok(out)
}

/// Converts a raw override to the type of the key's default value.
fn typed(key: &str, raw: &str, default: Option<&Value>) -> Result<Value, ConfigError> {
    let invalid = |message: String| ConfigError::InvalidValue { key: key.to_string(), message };
    Ok(match default {
        Some(Value::Integer(_)) => Value::Integer(raw.parse().map_err(|_| invalid(format!("expected an integer, got '{raw}'")))?),
        Some(Value::Float(_)) => Value::Float(raw.parse().map_err(|_| invalid(format!("expected a number, got '{raw}'")))?),
        Some(Value::Boolean(_)) => Value::Boolean(raw.parse().map_err(|_| invalid(format!("expected true or false, got '{raw}'")))?),
        _ => Value::String(raw.to_string()),
    })
}

fn set_path(table: &mut toml::Table, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| ConfigError::InvalidValue {
            key: key.to_string(),
            message: format!("'{p}' is not a table"),
        })?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Turns a serde error into a key-naming config error where possible.
fn deserialize_error(err: toml::de::Error) -> ConfigError {
    let msg = err.message().to_string();
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        let field = rest.split('`').next().unwrap_or(rest);
        return ConfigError::UnknownKey(field.to_string());
    }
    ConfigError::Parse(msg)
}

impl RunConfig {
    /// Parses TOML text, applies overrides, resolves relative data paths
    /// against `base_dir`, and validates every section.
    pub fn from_toml(text: &str, base_dir: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut user: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let reference = defaults();
        check_keys(&user, &reference, "")?;
        let mut keys = Vec::new();
        leaves(&reference, "", &mut keys);
        for (key, raw) in overrides {
            let default = keys.iter().find(|(p, _)| p == key).map(|(_, v)| v);
            if default.is_none() && !OPEN_TABLES.iter().any(|t| key.starts_with(&format!("{t}."))) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
            set_path(&mut user, key, typed(key, raw, default)?)?;
        }
        let mut cfg: RunConfig = Value::Table(user).try_into().map_err(deserialize_error)?;
        if let Some(base) = base_dir {
            cfg.resolve_paths(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = std::path::absolute(path)
            .ok()
            .and_then(|p| p.parent().map(Path::to_path_buf))
            .unwrap_or_default();
        Self::from_toml(&text, Some(&base), overrides)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.kgdata.train);
        fix(&mut self.kgdata.valid);
        fix(&mut self.kgdata.test);
        self.kgdata.modalities.values_mut().for_each(fix);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, message: String| ConfigError::InvalidValue { key: key.to_string(), message };
        self.trainer.validate().map_err(|e| invalid("trainer", e.to_string()))?;
        self.sampling.validate().map_err(|e| invalid("sampling", e.to_string()))?;
        self.model_config().validate().map_err(|e| invalid("fusion", e.to_string()))?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.trainer.embedding_dim,
            norm: self.scoring.norm,
            fusion: self.fusion.clone(),
        }
    }

    /// The fully resolved configuration as TOML; loading it back yields an
    /// equal configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
