//! Run configuration.
//!
//! Files hold `key.path = value` lines (a subset of TOML with dotted keys).
//! Anything not given keeps its default; unknown keys are rejected. The
//! latent motion model's `d_l` always follows `model.decoder.d_l`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::hashing::config_hash;
use crate::simulator::SimConfig;
use crate::tracker::{ModelConfig, TrackerConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub num_scenes: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { num_scenes: 200 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub tracker: TrackerConfig,
    pub sim: SimConfig,
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Short paths accepted in overrides and ablation axes.
fn expand_path(path: &str) -> String {
    for short in ["lmm.", "decoder."] {
        if path.starts_with(short) {
            return format!("model.{path}");
        }
    }
    path.to_string()
}

fn set_path(root: &mut Value, path: &str, v: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::invalid_config(path, "not a config section"))?;
        if !obj.contains_key(*p) {
            return Err(Error::invalid_config(path, "unknown key"));
        }
        if i + 1 == parts.len() {
            obj.insert((*p).to_string(), v);
            return Ok(());
        }
        cur = obj.get_mut(*p).expect("checked");
    }
    Err(Error::invalid_config(path, "empty key"))
}

fn toml_to_json(v: toml::Value) -> Value {
    match v {
        toml::Value::String(s) => Value::String(s),
        toml::Value::Integer(i) => Value::from(i),
        toml::Value::Float(f) => Value::from(f),
        toml::Value::Boolean(b) => Value::Bool(b),
        toml::Value::Array(a) => Value::Array(a.into_iter().map(toml_to_json).collect()),
        toml::Value::Table(t) => Value::Object(t.into_iter().map(|(k, v)| (k, toml_to_json(v))).collect()),
        toml::Value::Datetime(d) => Value::String(d.to_string()),
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&p, v, out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

/// Parses a scalar override value: TOML syntax, with bare words taken as
/// strings.
pub fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => toml_to_json(t.remove("v").expect("just inserted")),
        Err(_) => Value::String(raw.to_string()),
    }
}

impl RunConfig {
    fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    fn from_value(v: Value) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_value(v)
            .map_err(|e| Error::invalid_config("config", e.to_string()))?;
        cfg.model.lmm.d_l = cfg.model.decoder.d_l;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.tracker.validate()?;
        self.sim.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    /// Defaults overlaid with the `key.path = value` lines of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::invalid_config("config", e.message().to_string()))?;
        let mut pairs = Vec::new();
        flatten("", &toml_to_json(toml::Value::Table(table)), &mut pairs);
        let mut v = Self::default().to_value();
        for (k, val) in pairs {
            set_path(&mut v, &expand_path(&k), val)?;
        }
        Self::from_value(v)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies `path = value` overrides in order.
    pub fn with_overrides(&self, overrides: &[(String, Value)]) -> Result<Self> {
        let mut v = self.to_value();
        for (k, val) in overrides {
            set_path(&mut v, &expand_path(k), val.clone())?;
        }
        Self::from_value(v)
    }

    /// Every field as a `key.path = value` line.
    pub fn dump(&self) -> String {
        let mut pairs = Vec::new();
        flatten("", &self.to_value(), &mut pairs);
        let mut out = String::new();
        for (k, v) in pairs {
            if k == "model.lmm.d_l" {
                continue;
            }
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Hash of the whole configuration.
    pub fn hash(&self) -> String {
        config_hash(self)
    }

    /// Hash of the architecture only; checkpoints carry it.
    pub fn model_hash(&self) -> String {
        config_hash(&self.model)
    }

    pub fn sim_hash(&self) -> String {
        config_hash(&self.sim)
    }
}

/// One `key=value` assignment.
pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::InvalidAxis(format!("expected key=value, got `{s}`")))?;
    Ok((k.trim().to_string(), parse_value(v)))
}

/// An ablation axis: variants separated by `|`, each a comma-separated list
/// of `key=value` assignments. `none` denotes the unchanged base.
pub fn parse_axis(spec: &str) -> Result<Vec<Vec<(String, Value)>>> {
    let variants: Vec<&str> = spec.split('|').map(str::trim).collect();
    if variants.iter().all(|v| v.is_empty()) {
        return Err(Error::InvalidAxis("empty axis".into()));
    }
    variants
        .into_iter()
        .map(|v| {
            if v.is_empty() || v == "none" {
                return Ok(Vec::new());
            }
            v.split(',').map(|a| parse_assignment(a.trim())).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.dump()).unwrap(), cfg);
    }

    #[test]
    fn partial_file_overrides_defaults() {
        let cfg = RunConfig::parse("seed = 9\nmodel.decoder.d_l = 32\nlmm.variant = \"full_rank\"\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.lmm.d_l, 32);
        assert_eq!(cfg.model.lmm.variant, crate::lmm::LmmVariant::FullRank);
        assert_eq!(cfg.sim, SimConfig::default());
    }

    #[test]
    fn head_count_must_divide_latent() {
        let err = RunConfig::parse("model.decoder.h = 5\n").unwrap_err();
        assert!(err.to_string().contains("model.decoder.h"), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::parse("model.decoder.width = 5\n").unwrap_err();
        assert!(err.to_string().contains("model.decoder.width"), "{err}");
    }

    #[test]
    fn axis_parsing() {
        let a = parse_axis("none|model.use_lmm=false,lmm.h=8").unwrap();
        assert_eq!(a.len(), 2);
        assert!(a[0].is_empty());
        assert_eq!(a[1][0], ("model.use_lmm".to_string(), Value::Bool(false)));
        assert_eq!(a[1][1], ("lmm.h".to_string(), Value::from(8)));
        let cfg = RunConfig::default().with_overrides(&a[1]).unwrap();
        assert!(!cfg.model.use_lmm);
        assert_eq!(cfg.model.lmm.h, 8);
        assert!(matches!(parse_axis("lmm.h"), Err(Error::InvalidAxis(_))));
        assert!(parse_value("multi_head") == Value::String("multi_head".into()));
    }

    #[test]
    fn hashes_track_changes() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..a };
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.model_hash(), b.model_hash());
    }
}
