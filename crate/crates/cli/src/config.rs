//! Run configuration: a JSON document, dotted `--set` overrides and the
//! `REMIX_SEED` environment override.

use std::fs;
use std::path::Path;

use remix_core::data::DatasetSpec;
use remix_core::training::TrainConfig;
use serde_json::{Map, Value};

use crate::exit::CliError;

pub const SEED_ENV: &str = "REMIX_SEED";

/// Reads a JSON file. A run manifest is accepted in place of a config and
/// contributes its resolved `config` block.
pub fn read_config_value(path: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("config {} is not valid JSON: {e}", path.display())))?;
    Ok(match value {
        Value::Object(mut map) if is_manifest(&map) => map.remove("config").expect("checked"),
        other => other,
    })
}

fn is_manifest(map: &Map<String, Value>) -> bool {
    map.contains_key("config") && map.contains_key("code_version")
}

/// Applies `key.path=value`. The value is parsed as JSON when possible and
/// taken as a bare string otherwise, so `method=vae` and `lr=1e-3` both work.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("override key `{key}` has an empty segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for (i, seg) in path.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(CliError::config(format!(
                "override `{key}`: `{}` is not an object",
                path[..i].join(".")
            )));
        };
        if i + 1 == path.len() {
            map.insert(seg.to_string(), value);
            return Ok(());
        }
        node = map.entry(seg.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("path has at least one segment")
}

/// Builds the final config: file (or defaults), then overrides, then the seed
/// from the environment.
pub fn resolve(path: Option<&Path>, overrides: &[String], env_seed: Option<&str>) -> Result<TrainConfig, CliError> {
    let mut root = match path {
        Some(p) => read_config_value(p)?,
        None => Value::Object(Map::new()),
    };
    if !root.is_object() {
        return Err(CliError::config("config must be a JSON object".into()));
    }
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    if let Some(raw) = env_seed {
        let seed: u64 = raw
            .trim()
            .parse()
            .map_err(|_| CliError::config(format!("{SEED_ENV}=`{raw}` is not an unsigned integer")))?;
        root["seed"] = Value::from(seed);
    }
    serde_json::from_value(root).map_err(|e| CliError::config(format!("invalid config: {e}")))
}

/// What a `--data` file describes.
pub enum DataSource {
    Run(Box<TrainConfig>),
    Dataset(DatasetSpec),
}

impl DataSource {
    pub fn spec(&self) -> &DatasetSpec {
        match self {
            Self::Run(c) => &c.dataset,
            Self::Dataset(d) => d,
        }
    }
}

/// Reads a run config, run manifest or bare dataset spec.
pub fn read_data_source(path: &Path) -> Result<DataSource, CliError> {
    let value = read_config_value(path)?;
    let invalid = |e: serde_json::Error| CliError::config(format!("{}: {e}", path.display()));
    if value.get("kind").is_some() {
        Ok(DataSource::Dataset(serde_json::from_value(value).map_err(invalid)?))
    } else {
        Ok(DataSource::Run(Box::new(
            serde_json::from_value(value).map_err(invalid)?,
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use remix_core::training::Method;
    use serde_json::json;

    #[test]
    fn overrides_parse_json_then_fall_back_to_strings() {
        let mut v = json!({"lr": 0.1, "dataset": {"kind": "bimodal_toy", "n": 10, "seed": 0}});
        apply_override(&mut v, "lr=1e-3").unwrap();
        apply_override(&mut v, "method=vae").unwrap();
        apply_override(&mut v, "dataset.n=50").unwrap();
        apply_override(&mut v, "encoder_hidden=[8,8]").unwrap();
        apply_override(&mut v, "dataset.geometry.c=2.0").unwrap();
        assert_eq!(v["lr"], json!(1e-3));
        assert_eq!(v["method"], json!("vae"));
        assert_eq!(v["dataset"]["n"], json!(50));
        assert_eq!(v["encoder_hidden"], json!([8, 8]));
        assert_eq!(v["dataset"]["geometry"]["c"], json!(2.0));
    }

    #[test]
    fn malformed_overrides_are_rejected() {
        let mut v = json!({"lr": 0.1});
        assert!(apply_override(&mut v, "lr").is_err());
        assert!(apply_override(&mut v, "a..b=1").is_err());
        assert!(apply_override(&mut v, "lr.x=1").is_err());
    }

    #[test]
    fn env_seed_wins_over_overrides() {
        let c = resolve(None, &["seed=3".into(), "method=me".into()], Some("11")).unwrap();
        assert_eq!((c.seed, c.method), (11, Method::Me));
        assert!(resolve(None, &[], Some("-1")).is_err());
        assert!(resolve(None, &["no_such_field=1".into()], None).is_err());
    }
}
