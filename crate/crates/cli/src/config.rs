//! Flag and config-file merging.
//!
//! Every subcommand's arguments are plain `Option` fields. A TOML file passed
//! with `--config` supplies values for fields left unset on the command line;
//! either the whole file is a flat table of keys, or it holds one table per
//! subcommand (`[train]`, `[detect]`, ...). Keys use the flag names with
//! `-` or `_` interchangeably.

use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Failure to parse or merge a config file. Reported with exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn normalize_keys(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m.into_iter().map(|(k, v)| (k.replace('-', "_"), v)).collect(),
        _ => Map::new(),
    }
}

fn read_file(path: &Path, section: &str) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
    let table: toml::Table =
        toml::from_str(&text).map_err(|e| ConfigError(format!("bad config {}: {e}", path.display())))?;
    let value = serde_json::to_value(table).context("config to json")?;
    let mut map = normalize_keys(value);
    match map.remove(section) {
        Some(v @ Value::Object(_)) => Ok(normalize_keys(v)),
        _ => Ok(map),
    }
}

/// Overlay the flags in `args` onto the `section` of `file`; flags win.
pub fn merge<A: Serialize + DeserializeOwned>(args: &A, file: Option<&Path>, section: &str) -> Result<A> {
    let mut base = match file {
        Some(p) => read_file(p, section)?,
        None => Map::new(),
    };
    if let Value::Object(flags) = serde_json::to_value(args).context("flags to json")? {
        for (k, v) in flags {
            if !v.is_null() && v != Value::Bool(false) {
                base.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(base))
        .map_err(|e| ConfigError(format!("config section [{section}]: {e}")).into())
}

/// Write the resolved run configuration as `run_config.json` in `dir`.
pub fn echo(dir: &Path, command: &str, resolved: &impl Serialize) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let body = serde_json::json!({ "command": command, "config": resolved });
    let path = dir.join("run_config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&body)?).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, Serialize, Deserialize, PartialEq)]
    #[serde(deny_unknown_fields)]
    struct Args {
        lr: Option<f64>,
        batch_size: Option<usize>,
        #[serde(default)]
        flag: bool,
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\nlr = 0.5\nbatch-size = 4\nflag = true\n").unwrap();
        let args = Args {
            lr: Some(0.1),
            ..Default::default()
        };
        let m = merge(&args, Some(&p), "train").unwrap();
        assert_eq!(
            m,
            Args {
                lr: Some(0.1),
                batch_size: Some(4),
                flag: true
            }
        );
    }

    #[test]
    fn flat_file_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "lr = 0.5\n").unwrap();
        assert_eq!(merge(&Args::default(), Some(&p), "train").unwrap().lr, Some(0.5));
        std::fs::write(&p, "bogus = 1\n").unwrap();
        let err = merge(&Args::default(), Some(&p), "train").unwrap_err();
        assert!(err.downcast_ref::<ConfigError>().is_some());
    }
}
