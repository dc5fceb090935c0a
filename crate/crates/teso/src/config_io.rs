//! Config file loading with `dotted.key=value` overrides.

use std::fs;
use std::path::Path;

use teso_core::config::ExperimentConfig;
use toml::{Table, Value};

use crate::error::{CliError, Result};
use crate::fsutil::sha256_hex;

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies one `a.b.c=value` override to a TOML table.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| CliError::Override(spec.to_string()))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Override(spec.to_string()));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| CliError::Override(spec.to_string()))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

fn from_table(table: Table, origin: &Path) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = table.try_into().map_err(|source| CliError::Toml { path: origin.to_path_buf(), source })?;
    Ok(cfg.resolved()?)
}

/// Loads and resolves a config; `None` starts from the defaults.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let (mut table, origin) = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(CliError::io(p))?;
            let t: Table = text.parse().map_err(|source| CliError::Toml { path: p.to_path_buf(), source })?;
            (t, p.to_path_buf())
        }
        None => (Table::new(), "<defaults>".into()),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    from_table(table, &origin)
}

/// The resolved config as TOML, as written into every run directory.
pub fn config_snapshot(config: &ExperimentConfig) -> String {
    toml::to_string(config).expect("config serializes to TOML")
}

/// Stable content hash of a config.
pub fn config_hash(config: &ExperimentConfig) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("config serializes to JSON"))
}
