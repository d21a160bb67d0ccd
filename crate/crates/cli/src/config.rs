//! Config files and `--set key=value` overrides.

use crate::error::{CliError, CliResult, WithPath};
use iwavb_core::estimators::FitConfig;
use iwavb_core::io::SCHEMA_VERSION;
use iwavb_core::simlab::SimDesign;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::path::Path;

/// Category counts: one value for every item, or one per item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Categories {
    All(usize),
    PerItem(Vec<usize>),
}

impl Categories {
    pub fn resolve(&self, n_items: usize) -> CliResult<Vec<usize>> {
        match self {
            Categories::All(c) => Ok(vec![*c; n_items]),
            Categories::PerItem(v) if v.len() == n_items => Ok(v.clone()),
            Categories::PerItem(v) => Err(CliError::input(format!(
                "categories: {} entries for {n_items} items",
                v.len()
            ))),
        }
    }
}

/// The file form of a fit configuration: estimator settings plus the data
/// handling keys the library does not know about.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub fit: FitConfig,
    /// Share of respondents withheld from training by a seeded split.
    pub holdout_fraction: Option<f64>,
    /// Overrides category counts inferred from the data.
    pub categories: Option<Categories>,
}

impl RunConfig {
    pub fn new(fit: FitConfig) -> Self {
        Self {
            fit,
            holdout_fraction: None,
            categories: None,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.fit.validate()?;
        if let Some(f) = self.holdout_fraction {
            check_fraction(f)?;
        }
        Ok(())
    }
}

pub fn check_fraction(f: f64) -> CliResult<()> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(CliError::input(format!("holdout fraction must lie in (0, 1), got {f}")))
    }
}

/// Splits `key=value`; the value is read as JSON when it parses and as a
/// string otherwise.
pub fn parse_override(s: &str) -> CliResult<(String, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::input(format!("override `{s}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(CliError::input(format!("override `{s}` has an empty key")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    Ok((key.to_string(), value))
}

/// Sets a dotted key such as `adamw.weight_decay`, creating objects on the way.
pub fn set_key(doc: &mut Map<String, Value>, key: &str, value: Value) -> CliResult<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = doc;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let slot = cur.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
        cur = slot
            .as_object_mut()
            .ok_or_else(|| CliError::input(format!("`{part}` in `{key}` is not an object")))?;
    }
    Ok(())
}

/// Reads a JSON object, unwrapping a run manifest to its recorded config and
/// checking any `schema_version`.
pub fn read_document(path: &Path) -> CliResult<Map<String, Value>> {
    let text = std::fs::read_to_string(path).at(path)?;
    let value: Value = serde_json::from_str(&text).at(path)?;
    let mut obj = match value {
        Value::Object(o) => o,
        _ => return Err(CliError::input(format!("{}: expected a JSON object", path.display()))),
    };
    if obj.contains_key("command") && obj.get("config").is_some_and(Value::is_object) {
        if let Some(Value::Object(inner)) = obj.remove("config") {
            obj = inner;
        }
    }
    if let Some(v) = obj.remove("schema_version") {
        if v.as_u64() != Some(SCHEMA_VERSION as u64) {
            return Err(CliError::input(format!(
                "{}: schema_version {v} is not supported (expected {SCHEMA_VERSION})",
                path.display()
            )));
        }
    }
    Ok(obj)
}

fn merged(path: Option<&Path>, overrides: &[String]) -> CliResult<Map<String, Value>> {
    let mut doc = match path {
        Some(p) => read_document(p)?,
        None => Map::new(),
    };
    for o in overrides {
        let (k, v) = parse_override(o)?;
        set_key(&mut doc, &k, v)?;
    }
    Ok(doc)
}

fn take<T: serde::de::DeserializeOwned>(doc: &mut Map<String, Value>, key: &str) -> CliResult<Option<T>> {
    match doc.remove(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v)
            .map(Some)
            .map_err(|e| CliError::input(format!("config field `{key}`: {e}"))),
    }
}

/// Resolves the fit configuration from an optional file plus overrides
/// (overrides win) and validates it.
pub fn load_run_config(path: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
    let mut doc = merged(path, overrides)?;
    let holdout_fraction = take(&mut doc, "holdout_fraction")?;
    let categories = take(&mut doc, "categories")?;
    let fit: FitConfig =
        serde_json::from_value(Value::Object(doc)).map_err(|e| CliError::input(format!("config: {e}")))?;
    let cfg = RunConfig {
        fit,
        holdout_fraction,
        categories,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_design(path: &Path, overrides: &[String]) -> CliResult<SimDesign> {
    let doc = merged(Some(path), overrides)?;
    let design: SimDesign =
        serde_json::from_value(Value::Object(doc)).map_err(|e| CliError::input(format!("design: {e}")))?;
    design.validate().map_err(|e| CliError::from(e).context("design"))?;
    Ok(design)
}

#[cfg(test)]
mod tests {
    use super::*;
    use iwavb_core::estimators::EstimatorKind;

    #[test]
    fn override_values_are_json_when_possible() {
        assert_eq!(parse_override("seed=7").unwrap(), ("seed".into(), Value::from(7)));
        assert_eq!(parse_override("kind=iwae").unwrap(), ("kind".into(), Value::from("iwae")));
        assert_eq!(
            parse_override("disc_hidden=[64,32]").unwrap().1,
            serde_json::json!([64, 32])
        );
        assert!(parse_override("seed").is_err());
        assert!(parse_override("=3").is_err());
    }

    #[test]
    fn dotted_keys_nest() {
        let mut m = Map::new();
        set_key(&mut m, "adamw.weight_decay", Value::from(0.0)).unwrap();
        assert_eq!(Value::Object(m), serde_json::json!({"adamw": {"weight_decay": 0.0}}));
    }

    #[test]
    fn flags_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(
            &path,
            r#"{"schema_version": 1, "kind": "iwavb", "n_factors": 2, "seed": 3, "holdout_fraction": 0.25}"#,
        )
        .unwrap();
        let cfg = load_run_config(Some(&path), &["kind=iwae".into(), "seed=9".into()]).unwrap();
        assert_eq!(cfg.fit.kind, EstimatorKind::Iwae);
        assert_eq!(cfg.fit.seed, 9);
        assert_eq!(cfg.fit.n_factors, 2);
        assert_eq!(cfg.holdout_fraction, Some(0.25));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(load_run_config(None, &["bogus=1".into()]).is_err());
        assert!(load_run_config(None, &["holdout_fraction=1.5".into()]).is_err());
        assert!(load_run_config(None, &["kind=vae".into(), "iw_samples=5".into()]).is_err());
        let err = load_run_config(None, &["lr_gen=-1".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("lr_gen"), "{err}");
    }

    #[test]
    fn manifest_config_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        std::fs::write(
            &path,
            r#"{"schema_version": 1, "command": "fit", "config": {"kind": "vae", "seed": 4, "categories": 3}}"#,
        )
        .unwrap();
        let cfg = load_run_config(Some(&path), &[]).unwrap();
        assert_eq!(cfg.fit.kind, EstimatorKind::Vae);
        assert_eq!(cfg.categories, Some(Categories::All(3)));
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::new(FitConfig::new(EstimatorKind::Iwae, 2));
        cfg.holdout_fraction = Some(0.2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(load_run_config(Some(&path), &[]).unwrap(), cfg);
    }

    #[test]
    fn categories_resolve() {
        assert_eq!(Categories::All(4).resolve(2).unwrap(), vec![4, 4]);
        assert!(Categories::PerItem(vec![2]).resolve(2).is_err());
    }
}
