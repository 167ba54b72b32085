//! Run configuration: one TOML tree plus dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::data::synth::SynthConfig;
use crate::data::CountChannel;
use crate::error::{Error, Result};
use crate::mask::MaskConfig;
use crate::metrics::BucketRule;
use crate::models::ModelConfig;
use crate::trainer::{Ablation, NetworkSpec, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Movielens,
    /// Columnar text file written by `write_columnar`, with a schema file.
    Columnar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// MovieLens directory or columnar file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Use MovieLens title tokens as a feature.
    pub titles: bool,
    /// Train/validation/test ratios for random splitting.
    pub split: [f64; 3],
    /// Describe user and item state as of each sample's timestamp, using only
    /// earlier training interactions, instead of at the end of training.
    pub temporal_stats: bool,
    /// Count channels of columnar data.
    pub channels: Vec<CountChannel>,
    pub synth: SynthConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            path: None,
            titles: false,
            split: [0.6, 0.2, 0.2],
            temporal_stats: false,
            channels: vec![CountChannel::Impression],
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemaConfig {
    pub dim: usize,
    /// Schema file; required for columnar data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        Self { dim: 16, path: None }
    }
}

/// Grouping rules for bucketed metrics and weight heatmaps. Users and items
/// are grouped by their training impressions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub item_impressions: BucketRule,
    pub user_state: BucketRule,
    pub item_state: BucketRule,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            item_impressions: BucketRule::item_impressions(),
            user_state: BucketRule::user_state(),
            item_state: BucketRule::item_state(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub schema: SchemaConfig,
    pub model: ModelConfig,
    pub mask: MaskConfig,
    pub adapter: AdapterConfig,
    pub trainer: TrainConfig,
    pub metrics: MetricsConfig,
}

/// Splits `a.b.c=value`; the value is parsed as a TOML literal, falling back
/// to a bare string.
fn parse_override(text: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::config(text, "override must have the form key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::config(key, "malformed key"));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.split('.').map(str::to_string).collect(), value))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let mut cur = table;
    for (depth, part) in path[..path.len() - 1].iter().enumerate() {
        let entry = cur
            .entry(part.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(path[..=depth].join("."), "is not a table"))?;
    }
    cur.insert(path[path.len() - 1].clone(), value);
    Ok(())
}

impl RunConfig {
    /// Parses `text` (may be empty), applies `overrides` in order, and validates.
    pub fn from_parts(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::config("<config>", e.to_string()))?;
        for o in overrides {
            let (path, value) = parse_override(o)?;
            set_path(&mut table, &path, value)?;
        }
        let config: Self = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<root>".into() } else { path }, e.inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_parts(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<root>", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::config("seed", "must fit in a signed 64-bit integer"));
        }
        let d = &self.dataset;
        if d.split.iter().any(|&r| !(r >= 0.0 && r.is_finite())) || (d.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("dataset.split", "ratios must be non-negative and sum to 1"));
        }
        match d.kind {
            DatasetKind::Synthetic => d.synth.validate().map_err(|e| Error::config("dataset.synth", e.to_string()))?,
            DatasetKind::Movielens if d.path.is_none() => {
                return Err(Error::config("dataset.path", "MovieLens needs the ratings directory"));
            }
            DatasetKind::Columnar if d.path.is_none() || self.schema.path.is_none() => {
                return Err(Error::config("dataset.path", "columnar data needs both dataset.path and schema.path"));
            }
            _ => {}
        }
        if d.kind == DatasetKind::Columnar && d.channels.is_empty() {
            return Err(Error::config("dataset.channels", "need at least one count channel"));
        }
        if self.schema.dim == 0 {
            return Err(Error::config("schema.dim", "must be positive"));
        }
        self.model.validate()?;
        self.mask.validate()?;
        self.adapter.validate()?;
        self.trainer.validate()?;
        for (key, rule) in [
            ("metrics.item_impressions", &self.metrics.item_impressions),
            ("metrics.user_state", &self.metrics.user_state),
            ("metrics.item_state", &self.metrics.item_state),
        ] {
            BucketRule::new(&rule.name, rule.edges.clone(), rule.labels.clone())
                .map_err(|e| Error::config(key, e.to_string()))?;
        }
        Ok(())
    }

    /// The ablation actually trained: `mask.k = 0` drops the mask branch and
    /// `adapter.enabled = false` drops the adapter.
    pub fn effective_ablation(&self) -> Ablation {
        let mask = self.trainer.ablation.uses_mask() && self.mask.k > 0;
        let adapter = self.trainer.ablation.uses_adapter() && self.adapter.enabled;
        match (mask, adapter) {
            (false, false) => Ablation::BaseOnly,
            (true, false) => Ablation::MaskOnly,
            (false, true) => Ablation::AdapterOnly,
            (true, true) => Ablation::Full,
        }
    }

    /// Trainer settings with the effective ablation filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            ablation: self.effective_ablation(),
            ..self.trainer.clone()
        }
    }

    pub fn network_spec(&self, channels: Vec<CountChannel>) -> NetworkSpec {
        NetworkSpec {
            model: self.model.clone(),
            adapter: self.adapter.clone(),
            use_adapter: self.effective_ablation().uses_adapter(),
            channels,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelKind;

    fn sets(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn defaults_parse_from_empty_text() {
        let c = RunConfig::from_parts("", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.effective_ablation(), Ablation::Full);
        assert_eq!((c.mask.k, c.mask.beta, c.mask.gamma), (1, 0.1, 0.5));
        assert_eq!(c.trainer.alpha, 0.2);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let text = "seed = 3\n[model]\nkind = \"mlp\"\n";
        let c = RunConfig::from_parts(
            text,
            &sets(&["mask.gamma=0.7", "trainer.lr=0.01", "dataset.synth.users=50", "model.kind=two_tower", "seed=9"]),
        )
        .unwrap();
        assert_eq!(c.mask.gamma, 0.7);
        assert_eq!(c.trainer.lr, 0.01);
        assert_eq!(c.dataset.synth.users, 50);
        assert_eq!(c.model.kind, ModelKind::TwoTower);
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn mask_and_adapter_switches_give_base_only() {
        let c = RunConfig::from_parts("", &sets(&["mask.k=0", "adapter.enabled=false"])).unwrap();
        assert_eq!(c.effective_ablation(), Ablation::BaseOnly);
        assert!(!c.network_spec(vec![]).use_adapter);
        let c = RunConfig::from_parts("", &sets(&["trainer.ablation=\"mask_only\""])).unwrap();
        assert_eq!(c.effective_ablation(), Ablation::MaskOnly);
    }

    #[test]
    fn errors_carry_key_paths() {
        let err = |o: &[&str]| RunConfig::from_parts("", &sets(o)).unwrap_err().to_string();
        assert!(err(&["mask.beta=0.9"]).contains("mask"), "{}", err(&["mask.beta=0.9"]));
        assert!(err(&["trainer.lr=-1"]).contains("trainer.lr"));
        assert!(err(&["model.kind=cnn"]).contains("model.kind"));
        assert!(err(&["trainer.bogus=1"]).contains("trainer"));
        assert!(err(&["dataset.synth.users=1"]).contains("dataset.synth"));
        assert!(err(&["dataset.kind=movielens"]).contains("dataset.path"));
        assert!(err(&["noequals"]).contains("key=value"));
        assert!(err(&["seed.x=1"]).contains("seed"));
        assert!(err(&["metrics.user_state.edges=[5, 2, 9]"]).contains("metrics.user_state"));
    }

    #[test]
    fn resolved_dump_round_trips() {
        let c = RunConfig::from_parts(
            "",
            &sets(&["trainer.lr=0.0123456789", "mask.beta=0.15", "dataset.path=\"/tmp/x\"", "trainer.clip_norm=5.0"]),
        )
        .unwrap();
        let text = c.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_parts(&text, &[]).unwrap(), c);
    }
}
