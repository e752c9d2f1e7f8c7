//! TOML run files and flag overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use netsim_core::config::SimulationConfig;

use crate::error::{config, CliError};

/// Input files for a run. Relative paths are resolved against the run file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputConfig {
    pub graph: Option<PathBuf>,
    pub agents: Option<PathBuf>,
    /// Treat each edge-list line as one directed edge. When false every line
    /// adds both directions.
    pub directed: bool,
    /// Optional precomputed PPR matrix as written by `ppr-dump`.
    pub ppr: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunFile {
    pub input: InputConfig,
    pub simulation: SimulationConfig,
}

/// Sources of a run configuration, applied in order: file, `--set`, named flags.
#[derive(Debug, Default)]
pub struct Overrides {
    pub sets: Vec<String>,
    pub named: Vec<(String, toml::Value)>,
}

impl Overrides {
    pub fn named(&mut self, key: &str, value: Option<impl Into<toml::Value>>) {
        if let Some(v) = value {
            self.named.push((key.to_string(), v.into()));
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // `x = <raw>` parses numbers, booleans, arrays and quoted strings; anything else is a bare string.
    match format!("x = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("x").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config(format!("bad override key {key:?}")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| config(format!("override {key:?}: {p:?} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

/// Builds the run configuration. Keys of `--set` are dotted paths such as
/// `simulation.tau` or `input.graph`.
pub fn load(file: Option<&Path>, overrides: &Overrides) -> Result<RunFile, CliError> {
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| config(format!("{}: {e}", path.display())))?;
            text.parse::<toml::Table>().map_err(|e| config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    for s in &overrides.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| config(format!("override {s:?} is not key=value")))?;
        set_path(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    for (k, v) in &overrides.named {
        set_path(&mut table, k, v.clone())?;
    }
    let mut run: RunFile = toml::Value::Table(table).try_into().map_err(config)?;
    let base = file.and_then(Path::parent).unwrap_or(Path::new(""));
    resolve(base, &mut run.input.graph);
    resolve(base, &mut run.input.agents);
    resolve(base, &mut run.input.ppr);
    run.simulation.validate().map_err(config)?;
    if run.simulation.steps < 1 {
        return Err(config("simulation.steps must be at least 1"));
    }
    Ok(run)
}
