//! Run configuration in layers: the scenario preset, then a TOML file, then
//! command-line overrides.
//!
//! The file mirrors [`ScenarioConfig`]: top-level scalars such as `duration`
//! and `rng_seed`, plus one table per module (`[dynamics]`, `[model]`,
//! `[planner]`, `[schedule]`, `[influence]`, `[human_idm]`, ...). Only the
//! keys being changed need to appear. Arrays, including `[[background]]`,
//! replace the preset's array as a whole. Keys the preset does not know are
//! an error.

use std::path::Path;

use serde_json::{Map, Value};
use thiserror::Error;

use crate::scenario::{Mode, ScenarioConfig, ScenarioError, ScenarioKind};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },

    #[error("{origin}: {message}")]
    Syntax { origin: String, message: String },

    #[error("unknown key `{0}`")]
    UnknownKey(String),

    #[error("key `{key}` expects {expected}, found {found}")]
    WrongType { key: String, expected: &'static str, found: &'static str },

    #[error("invalid value for `{key}`: {message}")]
    BadValue { key: String, message: String },

    #[error("{0}")]
    Invalid(String),
}

/// Settings given on the command line; each wins over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub kind: Option<ScenarioKind>,
    pub mode: Option<Mode>,
    pub duration: Option<f64>,
    pub seed: Option<u64>,
}

/// Parsed but not yet applied configuration file.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigDocument {
    root: Map<String, Value>,
}

impl ConfigDocument {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = toml::from_str(text)
            .map_err(|e| ConfigError::Syntax { origin: origin.to_string(), message: e.to_string() })?;
        match serde_json::to_value(table) {
            Ok(Value::Object(root)) => Ok(Self { root }),
            Ok(_) => unreachable!("a TOML document is a table"),
            Err(e) => Err(ConfigError::Syntax { origin: origin.to_string(), message: e.to_string() }),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        Self::parse(&text, &path.display().to_string())
    }

    fn enum_key<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        self.root
            .get(key)
            .map(|v| {
                serde_json::from_value(v.clone())
                    .map_err(|e| ConfigError::BadValue { key: key.to_string(), message: e.to_string() })
            })
            .transpose()
    }
}

/// Effective configuration: preset for the chosen scenario and mode,
/// overlaid with `document`, then `overrides`.
pub fn resolve(document: Option<&ConfigDocument>, overrides: &Overrides) -> Result<ScenarioConfig, ConfigError> {
    let kind = match (overrides.kind, document) {
        (Some(k), _) => k,
        (None, Some(d)) => d.enum_key("kind")?.unwrap_or(ScenarioKind::LaneAdvise),
        (None, None) => ScenarioKind::LaneAdvise,
    };
    let mode = match (overrides.mode, document) {
        (Some(m), _) => m,
        (None, Some(d)) => d.enum_key("mode")?.unwrap_or(Mode::Active),
        (None, None) => Mode::Active,
    };

    let mut merged = serde_json::to_value(ScenarioConfig::preset(kind, mode))
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    if let Some(doc) = document {
        let Value::Object(base) = &mut merged else { unreachable!("config serializes to a table") };
        merge_table(base, &doc.root, "")?;
    }
    let mut config: ScenarioConfig =
        serde_json::from_value(merged).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    config.kind = kind;
    config.mode = mode;
    if let Some(d) = overrides.duration {
        config.duration = d;
    }
    if let Some(s) = overrides.seed {
        config.rng_seed = s;
    }
    config.validate().map_err(|e| match e {
        ScenarioError::InvalidConfig(m) => ConfigError::Invalid(m),
        other => ConfigError::Invalid(other.to_string()),
    })?;
    Ok(config)
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "nothing",
        Value::Bool(_) => "a boolean",
        Value::Number(n) if n.is_f64() => "a float",
        Value::Number(_) => "an integer",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "a table",
    }
}

fn merge_table(base: &mut Map<String, Value>, overlay: &Map<String, Value>, prefix: &str) -> Result<(), ConfigError> {
    for (key, value) in overlay {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        let Some(slot) = base.get_mut(key) else {
            return Err(ConfigError::UnknownKey(path));
        };
        match (slot, value) {
            (Value::Object(b), Value::Object(o)) => merge_table(b, o, &path)?,
            // Optional settings that are unset in the preset take any value.
            (slot @ Value::Null, v) => *slot = v.clone(),
            (slot, v) => {
                let compatible = match (&*slot, v) {
                    (Value::Number(b), Value::Number(o)) => b.is_f64() || !o.is_f64(),
                    (Value::Object(_), _) | (_, Value::Object(_)) => false,
                    (b, o) => std::mem::discriminant(b) == std::mem::discriminant(o),
                };
                if !compatible {
                    return Err(ConfigError::WrongType { key: path, expected: type_name(slot), found: type_name(v) });
                }
                *slot = v.clone();
            }
        }
    }
    Ok(())
}
