//! Run configuration: a TOML file, then `--set key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use saml_core::pipeline::PipelineConfig;
use serde::{Deserialize, Serialize};

/// Everything a subcommand may read. Serialised next to every run's
/// outputs as `config.toml`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub paths: Paths,
    pub sweep: SweepConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Parent of the per-run directories.
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub expert_counts: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            expert_counts: vec![1, 4, 10],
        }
    }
}

/// Marks configuration problems so they map to the validation exit code.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn parse_scalar(raw: &str) -> toml::Value {
    // reuse the TOML grammar for numbers, booleans and arrays; bare words are strings
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `dotted.path = raw` in a TOML tree. Every path segment must exist
/// (defaults are serialised in full) so typos are rejected.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let Some((path, raw)) = assignment.split_once('=') else {
        bail!(ConfigError(format!("override `{assignment}` is not key=value")));
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| ConfigError(format!("`{}` is not a table", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            if !table.contains_key(*key) && !matches!(*key, "lora_alpha") {
                bail!(ConfigError(format!("unknown config field `{path}`")));
            }
            table.insert(key.to_string(), parse_scalar(raw.trim()));
            return Ok(());
        }
        node = table
            .get_mut(*key)
            .ok_or_else(|| ConfigError(format!("unknown config field `{path}`")))?;
    }
    unreachable!("split always yields one segment")
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<RunConfig>(&text).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if overrides.is_empty() {
            return Ok(base);
        }
        let mut tree = toml::Value::try_from(&base).context("serialising config")?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: RunConfig = tree.try_into().map_err(|e| ConfigError(format!("after overrides: {e}")))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}
