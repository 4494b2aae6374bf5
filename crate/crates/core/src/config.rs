//! Run configuration: sectioned TOML with unknown keys rejected.
//!
//! The canonical text form sorts keys within each section, so the same
//! configuration always serializes to the same bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::DataConfig;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::evalkit::EvalConfig;
use crate::steer::SteerConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub steer: SteerConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let sections = [
            self.env.validate(),
            self.data.validate(),
            self.train.validate(),
            self.steer.validate(),
            self.eval.validate(),
        ];
        for r in sections {
            r.map_err(|e| match e {
                Error::Config(m) => Error::Config(m),
                other => Error::Config(other.to_string()),
            })?;
        }
        for (name, seed) in [("env", self.env.seed), ("train", self.train.seed), ("eval", self.eval.seed)] {
            if seed > i64::MAX as u64 {
                return Err(Error::Config(format!("{name}.seed exceeds {}", i64::MAX)));
            }
        }
        Ok(())
    }

    /// Applies one seed to every section that draws random numbers.
    pub fn with_seed(mut self, seed: u64) -> RunConfig {
        self.env.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
        self
    }

    pub fn to_canonical_string(&self) -> Result<String> {
        // Tables are BTreeMap-backed, so keys come out sorted.
        let value = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        toml::to_string(&value).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_round_trip() {
        let cfg = RunConfig::default().with_seed(42);
        let text = cfg.to_canonical_string().unwrap();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_canonical_string().unwrap(), text);
    }

    #[test]
    fn keys_are_sorted_within_sections() {
        let text = RunConfig::default().to_canonical_string().unwrap();
        let mut section_keys: Vec<Vec<String>> = Vec::new();
        for line in text.lines() {
            if line.starts_with('[') {
                section_keys.push(Vec::new());
            } else if let Some((k, _)) = line.split_once(" = ") {
                section_keys.last_mut().unwrap().push(k.to_string());
            }
        }
        assert_eq!(section_keys.len(), 5);
        for keys in section_keys {
            let mut sorted = keys.clone();
            sorted.sort();
            assert_eq!(keys, sorted);
        }
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = RunConfig::parse("[train]\nrep_epochs = 3\n\n[env]\nhorizon = 8\n").unwrap();
        assert_eq!(cfg.train.rep_epochs, 3);
        assert_eq!(cfg.env.horizon, 8);
        assert_eq!(cfg.data, DataConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in ["[train]\nlearning_rate = 0.1\n", "[bogus]\nx = 1\n", "top = 1\n"] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::parse("[train]\ntau_sim = 0.0\n").is_err());
        assert!(RunConfig::parse("[steer]\npca_rank = 64\n").is_err());
        assert!(RunConfig::parse("[env]\nhorizon = \"long\"\n").is_err());
    }

    #[test]
    fn seed_override_touches_all_sections() {
        let cfg = RunConfig::default().with_seed(7);
        assert_eq!((cfg.env.seed, cfg.train.seed, cfg.eval.seed), (7, 7, 7));
    }
}
