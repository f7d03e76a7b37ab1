//! The single run configuration shared by every stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::EvalConfig;
use crate::model::ModelConfig;
use crate::synthgen::DataConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for data generation.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Canonical text form; archived in checkpoints.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    /// One seed for data, initialization and batching.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.model.dim != self.data.dim {
            return Err(Error::Config(format!(
                "model.dim ({}) differs from data.dim ({})",
                self.model.dim, self.data.dim
            )));
        }
        let need = self.data.m.max(self.eval.m_pred);
        if self.model.max_len < need {
            return Err(Error::Config(format!(
                "model.max_len ({}) must cover {need} positions",
                self.model.max_len
            )));
        }
        Ok(())
    }
}

/// Sets `dotted.key = value` in a TOML document, `value` parsed as TOML
/// (bare words fall back to strings).
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut table = doc;
    for p in parents {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Parses a config file after applying overrides in order.
pub fn load_with_overrides(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: RunConfig = doc
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::TrainMode;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(RunConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn overrides_and_validation() {
        let c = load_with_overrides(
            "seed = 3\n[train]\nsteps = 10\n",
            &[
                "train.mode=single-query".into(),
                "train.lr = 0.01".into(),
                "model.layers=1".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.mode, TrainMode::SingleQuery);
        assert_eq!(c.train.steps, 10);
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.model.layers, 1);
        assert!(load_with_overrides("", &["model.dim=32".into()]).is_err());
        assert!(load_with_overrides("", &["nonsense".into()]).is_err());
        assert!(RunConfig::from_toml("[train]\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[model]\nmax_len = 3\n").is_err());
        let s = RunConfig::default().with_seed(9);
        assert_eq!((s.seed, s.model.seed, s.train.seed), (9, 9, 9));
    }
}
