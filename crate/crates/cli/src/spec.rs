//! Experiment files: every command-line option has a key here.
//!
//! ```toml
//! toy = 1
//! seed = 0
//! target = "n2"
//! outcomes = ["n3"]
//!
//! [fio]
//! epsilon = 1e-4
//! restarts = 4
//!
//! [fit]
//! degree = 3
//! ```
//!
//! Flags win over file values. The `fio` and `fit` tables are merged with
//! their flags and then deserialized as the library's own config types.

use std::path::{Path, PathBuf};

use natcf::{FioConfig, FitConfig};
use serde::Deserialize;
use toml::{Table, Value};

use crate::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub toy: Option<usize>,
    pub scm: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub evidence: Option<PathBuf>,
    pub out: Option<Vec<PathBuf>>,
    pub n: Option<usize>,
    pub seed: Option<u64>,
    pub cases: Option<usize>,
    /// `TARGET=VALUE` for single queries.
    pub change: Option<String>,
    pub target: Option<String>,
    pub outcomes: Option<Vec<String>>,
    pub mode: Option<String>,
    pub eps_list: Option<Vec<f64>>,
    pub resolution: Option<usize>,
    pub band: Option<f64>,
    pub format: Option<String>,
    #[serde(default)]
    pub fio: Table,
    #[serde(default)]
    pub fit: Table,
}

impl ExperimentSpec {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }
}

/// Sets `key` in `table` when the flag was given.
pub fn set<T: Into<Value>>(table: &mut Table, key: &str, flag: Option<T>) {
    if let Some(v) = flag {
        table.insert(key.to_string(), v.into());
    }
}

pub fn fio_config(table: Table) -> Result<FioConfig, CliError> {
    let cfg: FioConfig = Value::Table(table).try_into().map_err(|e| CliError::Usage(format!("[fio]: {e}")))?;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

pub fn fit_config(table: Table) -> Result<FitConfig, CliError> {
    let cfg: FitConfig = Value::Table(table).try_into().map_err(|e| CliError::Usage(format!("[fit]: {e}")))?;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

/// `"n2=0.19"` → `("n2", 0.19)`.
pub fn parse_change(text: &str) -> Result<(String, f64), CliError> {
    let (name, value) = text
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("change must look like TARGET=VALUE, got {text:?}")))?;
    let v: f64 = value
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("change value {value:?} is not a number")))?;
    if !v.is_finite() {
        return Err(CliError::Usage(format!("change value {v} is not finite")));
    }
    Ok((name.trim().to_string(), v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_tables() {
        let spec: ExperimentSpec = toml::from_str("toy = 2\n[fio]\nepsilon = 1e-3\nrestarts = 2\n").unwrap();
        assert_eq!(spec.toy, Some(2));
        let mut t = spec.fio;
        set(&mut t, "epsilon", Some(1e-2));
        set::<i64>(&mut t, "restarts", None);
        let cfg = fio_config(t).unwrap();
        assert_eq!(cfg.epsilon, 1e-2);
        assert_eq!(cfg.restarts, 2);
    }

    #[test]
    fn bad_configs_are_usage_errors() {
        assert!(toml::from_str::<ExperimentSpec>("colour = 1\n").is_err());
        let mut t = Table::new();
        set(&mut t, "optimizer", Some("newton"));
        assert!(matches!(fio_config(t), Err(CliError::Usage(_))));
        let mut t = Table::new();
        set(&mut t, "epsilon", Some(0.7));
        assert!(matches!(fio_config(t), Err(CliError::Usage(_))));
        let mut t = Table::new();
        set(&mut t, "degree", Some(0i64));
        assert!(matches!(fit_config(t), Err(CliError::Usage(_))));
    }

    #[test]
    fn changes_parse() {
        assert_eq!(parse_change("n2=0.19").unwrap(), ("n2".to_string(), 0.19));
        assert_eq!(parse_change(" x = -1e-3 ").unwrap(), ("x".to_string(), -1e-3));
        assert!(parse_change("n2").is_err());
        assert!(parse_change("n2=abc").is_err());
        assert!(parse_change("n2=inf").is_err());
    }
}
