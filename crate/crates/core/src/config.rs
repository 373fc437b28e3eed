//! One configuration file for every pipeline stage, with `section.key=value`
//! overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::CollectConfig;
use crate::evalkit::EvalConfig;
use crate::trainkit::TrainConfig;
use crate::worldsim::GenConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(String),
    #[error("override `{0}`: {1}")]
    Override(String, String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub size: f64,
    pub n_robots: usize,
    pub n_targets: usize,
    pub gen: GenConfig,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            size: 7.5,
            n_robots: 2,
            n_targets: 2,
            gen: GenConfig::default(),
        }
    }
}

/// Configuration for collection, training and evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub world: WorldConfig,
    pub collect: CollectConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("pipeline config serializes")
    }

    /// Reads `path` (defaults when `None`) and applies `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => Self::default().to_toml(),
        };
        let mut value: toml::Value = toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let base: PipelineConfig = value.clone().try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        // Fill absent keys so overrides can address any field.
        let mut full: toml::Value = toml::Value::try_from(&base).map_err(|e| ConfigError::Parse(e.to_string()))?;
        merge(&mut full, &value);
        value = full;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        value.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }
}

fn merge(dst: &mut toml::Value, src: &toml::Value) {
    match (dst, src) {
        (toml::Value::Table(d), toml::Value::Table(s)) => {
            for (k, v) in s {
                match d.get_mut(k) {
                    Some(dv) => merge(dv, v),
                    None => {
                        d.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (d, s) => *d = s.clone(),
    }
}

/// Sets `a.b.c=value`, parsing `value` as a TOML literal and falling back to a string.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<(), ConfigError> {
    let err = |m: &str| ConfigError::Override(spec.to_string(), m.to_string());
    let (key, raw) = spec.split_once('=').ok_or_else(|| err("expected key=value"))?;
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = root;
    for (i, p) in parts.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| err("path crosses a non-table value"))?;
        if i + 1 == parts.len() {
            table.insert((*p).to_string(), parsed);
            return Ok(());
        }
        cur = table
            .entry((*p).to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(err("empty key"))
}
