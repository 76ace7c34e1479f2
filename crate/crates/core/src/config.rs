//! Run configuration: JSON files plus `--set key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::io::SyntheticSpec;
use crate::objective::LossWeights;
use crate::partition::GroupingConfig;
use crate::priornet::PriorConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory; the synthetic generator is used when absent.
    pub path: Option<PathBuf>,
    /// Integer image downscale factor applied at load.
    pub downscale: u32,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            downscale: 1,
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub grouping: GroupingConfig,
    pub net: PriorConfig,
    pub output: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            grouping: GroupingConfig::default(),
            net: PriorConfig::default(),
            output: PathBuf::from("runs/default"),
            seed: 0,
        }
    }
}

fn field_error(path: String, message: String) -> Error {
    Error::Config {
        field: if path.is_empty() || path == "." { "<root>".into() } else { path },
        message,
    }
}

/// Deserializes with the failing field's dotted path in the error.
pub fn from_value<T: for<'de> Deserialize<'de>>(v: Value) -> Result<T> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        field_error(path, e.into_inner().to_string())
    })
}

/// Sets `key` (dotted path) in `root` to `raw`, parsed as JSON when possible
/// and as a plain string otherwise.
pub fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(field_error(key.into(), "malformed key".into()));
    }
    let mut cur = root;
    for (i, p) in parts.iter().enumerate() {
        let obj = match cur {
            Value::Object(m) => m,
            Value::Null => {
                *cur = Value::Object(Default::default());
                cur.as_object_mut().unwrap()
            }
            _ => {
                return Err(field_error(
                    parts[..i].join("."),
                    format!("`{key}` descends into a non-object value"),
                ))
            }
        };
        if i + 1 == parts.len() {
            obj.insert(p.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(p.to_string()).or_insert(Value::Null);
    }
    unreachable!()
}

impl RunConfig {
    /// Defaults, then the optional JSON file, then each `key=value` override.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        Self::load_onto(RunConfig::default(), path, overrides)
    }

    /// Like [`RunConfig::load`] but starting from `base`.
    pub fn load_onto(base: RunConfig, path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = serde_json::to_value(base).expect("config serializes");
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let file: Value = serde_json::from_str(&text).map_err(|e| Error::format(p, e.to_string()))?;
            merge(&mut tree, file);
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| field_error(o.clone(), "expected key=value".into()))?;
            set_path(&mut tree, k.trim(), v.trim())?;
        }
        let cfg: RunConfig = from_value(tree)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = &self.data.path {
            if !p.exists() {
                return Err(field_error("data.path".into(), format!("{} does not exist", p.display())));
            }
        } else {
            self.data.synthetic.validate()?;
        }
        if self.data.downscale == 0 {
            return Err(field_error("data.downscale".into(), "must be >= 1".into()));
        }
        if self.output.as_os_str().is_empty() {
            return Err(field_error("output".into(), "must not be empty".into()));
        }
        self.train.validate()?;
        self.loss.validate()?;
        self.grouping.validate()?;
        self.net.validate()
    }

    /// The config stored in a training checkpoint directory.
    pub fn from_checkpoint(dir: &Path) -> Result<Self> {
        let path = dir.join("state.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut v: Value = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let cfg = v
            .get_mut("config")
            .map(Value::take)
            .ok_or_else(|| Error::format(&path, "no `config` entry"))?;
        from_value(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Recursive object merge, `over` wins.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Every leaf of the default config as `(dotted.key, json value)`.
pub fn flattened_defaults() -> Vec<(String, String)> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
        match v {
            Value::Object(m) => {
                for (k, v) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            other => out.push((prefix.to_string(), other.to_string())),
        }
    }
    let mut out = Vec::new();
    walk("", &serde_json::to_value(RunConfig::default()).expect("config serializes"), &mut out);
    out
}

/// Help block listing every configurable field with its default.
pub fn defaults_help() -> String {
    let rows = flattened_defaults();
    let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config fields (override with --set key=value):\n");
    for (k, v) in rows {
        s.push_str(&format!("  {k:<w$}  {v}\n"));
    }
    s
}
