//! Run configuration: one nested structure flattened to dotted keys, read
//! from a sectioned `key = value` file and overridden by command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use combimatch::dataset::store::SplitConfig;
use combimatch::dataset::toy::ToyParams;
use combimatch::losses::LossConfig;
use combimatch::metrics::EvalConfig;
use combimatch::model::ModelConfig;
use combimatch::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub seed: u64,
    pub train_per_pattern: usize,
    pub val_per_pattern: usize,
    pub test_per_pattern: usize,
    #[serde(flatten)]
    pub toy: ToyParams,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SplitConfig::default();
        DataSection {
            seed: s.master_seed,
            train_per_pattern: s.train_per_pattern,
            val_per_pattern: s.val_per_pattern,
            test_per_pattern: s.test_per_pattern,
            toy: s.params,
        }
    }
}

impl DataSection {
    pub fn split_config(&self) -> SplitConfig {
        SplitConfig {
            master_seed: self.seed,
            params: self.toy.clone(),
            train_per_pattern: self.train_per_pattern,
            val_per_pattern: self.val_per_pattern,
            test_per_pattern: self.test_per_pattern,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct TrainSection {
    #[serde(flatten)]
    pub config: TrainConfig,
    /// Arithmetic used for training; checkpoints always store f32 weights.
    pub precision: Precision,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
}

/// Where a value comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Default published with the method.
    Paper,
    /// Default chosen here where nothing was published.
    Deviation,
    /// Set by a config file or a flag.
    User,
}

impl Provenance {
    pub fn tag(self) -> &'static str {
        match self {
            Provenance::Paper => "paper-default",
            Provenance::Deviation => "deviation-default",
            Provenance::User => "user-set",
        }
    }
}

/// Keys whose defaults are the published values.
const PUBLISHED: &[&str] = &[
    "data.tau",
    "data.train_per_pattern",
    "data.val_per_pattern",
    "data.test_per_pattern",
    "model.backbone.out_channels",
    "model.matcher.input_dim",
    "model.matcher.descriptor_dim",
    "loss.delta_p",
    "loss.delta_n",
    "loss.gamma",
    "loss.lambda_d",
    "loss.lambda_s",
    "loss.lambda_o",
    "train.lr",
    "eval.top_k",
];

fn flatten_into(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, x, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn flatten(v: &Value) -> BTreeMap<String, Value> {
    let mut out = BTreeMap::new();
    flatten_into("", v, &mut out);
    out
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("sections are objects");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

/// Every configurable key with its default, in sorted order.
pub fn default_keys() -> BTreeMap<String, Value> {
    flatten(&serde_json::to_value(RunConfig::default()).expect("config serializes"))
}

/// Parses a flag value: JSON when it parses (numbers, booleans, arrays),
/// `none` for an absent optional value, a plain string otherwise.
pub fn parse_value(text: &str) -> Value {
    if text == "none" {
        return Value::Null;
    }
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

/// The effective configuration and the keys set by the user.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub user_keys: Vec<String>,
}

impl Resolved {
    pub fn provenance(&self, key: &str) -> Provenance {
        if self.user_keys.iter().any(|k| k == key) {
            Provenance::User
        } else if PUBLISHED.contains(&key) {
            Provenance::Paper
        } else {
            Provenance::Deviation
        }
    }

    /// One `key = value  # tag` line per key, grouped by section.
    pub fn show(&self) -> String {
        let flat = flatten(&serde_json::to_value(&self.config).expect("config serializes"));
        let mut out = String::new();
        let mut entries: Vec<(&str, &str, &String, &Value)> = flat
            .iter()
            .map(|(key, v)| {
                let (sec, name) = key.rsplit_once('.').unwrap_or(("", key));
                (sec, name, key, v)
            })
            .collect();
        // Keys of a section stay together, ahead of its subsections.
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut section = String::new();
        for (sec, name, key, v) in entries {
            if sec != section {
                if !out.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{sec}]");
                section = sec.to_string();
            }
            let shown = if v.is_null() { "none".to_string() } else { v.to_string() };
            let _ = writeln!(out, "{name} = {shown}  # {}", self.provenance(key).tag());
        }
        out
    }
}

/// Layers defaults, then the file, then `--seed` (all seeds), then the
/// dotted-key flags.
pub fn resolve(file: Option<&Path>, seed: Option<u64>, flags: &[(String, String)]) -> Result<Resolved, CliError> {
    let mut flat = default_keys();
    let mut user_keys = Vec::new();
    let mut set = |key: &str, v: Value, flat: &mut BTreeMap<String, Value>| -> Result<(), CliError> {
        if !flat.contains_key(key) {
            return Err(CliError::Usage(format!("unknown configuration key `{key}`")));
        }
        flat.insert(key.to_string(), v);
        if !user_keys.iter().any(|k| k == key) {
            user_keys.push(key.to_string());
        }
        Ok(())
    };
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        let table: toml::Table = text
            .parse()
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let v = serde_json::to_value(table).map_err(|e| CliError::Usage(e.to_string()))?;
        for (key, x) in flatten(&v) {
            let x = if x.as_str() == Some("none") { Value::Null } else { x };
            set(&key, x, &mut flat)?;
        }
    }
    if let Some(s) = seed {
        for key in ["data.seed", "train.seed", "eval.seed"] {
            set(key, Value::from(s), &mut flat)?;
        }
    }
    for (key, text) in flags {
        set(key, parse_value(text), &mut flat)?;
    }
    let config: RunConfig = serde_json::from_value(unflatten(&flat)).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))?;
    config.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    config.loss.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    config.train.config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    config.data.toy.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(Resolved { config, user_keys })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_keys() {
        let r = resolve(None, None, &[]).unwrap();
        assert_eq!(r.config, RunConfig::default());
        assert!(default_keys().contains_key("model.backbone.k"));
        assert_eq!(r.provenance("loss.gamma"), Provenance::Paper);
        assert_eq!(r.provenance("train.epochs"), Provenance::Deviation);
    }

    #[test]
    fn layering_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "[train]\nepochs = 3\nlr = 0.5\npoints_per_part = 128\n\n[model.matcher]\nshape_only = true\n").unwrap();
        let flags = vec![("train.lr".to_string(), "0.25".to_string())];
        let r = resolve(Some(&path), Some(9), &flags).unwrap();
        assert_eq!(r.config.train.config.epochs, 3);
        assert_eq!(r.config.train.config.lr, 0.25);
        assert_eq!(r.config.train.config.points_per_part, Some(128));
        assert!(r.config.model.matcher.shape_only);
        assert_eq!((r.config.data.seed, r.config.train.config.seed, r.config.eval.seed), (9, 9, 9));
        assert_eq!(r.provenance("train.epochs"), Provenance::User);
        assert!(r.show().contains("epochs = 3  # user-set"));
    }

    #[test]
    fn unknown_or_bad_keys_are_usage_errors() {
        let bad = vec![("train.epoch".to_string(), "3".to_string())];
        assert!(matches!(resolve(None, None, &bad), Err(CliError::Usage(_))));
        let bad = vec![("train.epochs".to_string(), "many".to_string())];
        assert!(matches!(resolve(None, None, &bad), Err(CliError::Usage(_))));
        let bad = vec![("loss.delta_p".to_string(), "2.0".to_string())];
        assert!(matches!(resolve(None, None, &bad), Err(CliError::Usage(_))));
    }
}
