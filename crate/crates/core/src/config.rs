//! Run configuration: a TOML document with every field required and
//! unknown keys rejected. Errors carry the offending key path.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::metrics::ClassifierConfig;
use crate::prior::{PriorConfig, SampleParams, Stage2TrainConfig};
use crate::vqgan::{Stage1TrainConfig, VqGanConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Samples drawn per evaluation for the generated-video metrics.
    pub samples: usize,
    pub classifier: ClassifierConfig,
    /// Dataset the classifier is trained on (split in half for testing).
    pub classifier_data: DatasetSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Fraction of the dataset used for training; the rest is held out.
    pub train_fraction: f64,
    pub data: DatasetSpec,
    pub vqgan: VqGanConfig,
    pub stage1: Stage1TrainConfig,
    pub prior: PriorConfig,
    pub stage2: Stage2TrainConfig,
    pub sample: SampleParams,
    pub eval: EvalConfig,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<document>", e.message().to_string()))?;
        let cfg: Config = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<document>", e.to_string()))
    }

    /// Writes the resolved configuration as `config.toml` into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.toml");
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        self.vqgan.validate()?;
        self.prior.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::config("train_fraction", "must lie in (0, 1]"));
        }
        if self.data.resolution != self.vqgan.resolution || self.data.channels != self.vqgan.channels {
            return Err(Error::config("vqgan.resolution", "must match data.resolution and data.channels"));
        }
        if self.prior.n_classes != self.data.n_classes {
            return Err(Error::config("prior.n_classes", "must equal data.n_classes"));
        }
        if self.stage1.batch_size == 0 || self.stage2.batch_size == 0 {
            return Err(Error::config("stage1.batch_size", "batch sizes must be positive"));
        }
        if self.sample.top_k == 0 || self.sample.top_k > self.vqgan.codebook_size || self.sample.temperature <= 0.0 {
            return Err(Error::config("sample.top_k", "top_k must lie in 1..=codebook_size and temperature be positive"));
        }
        Ok(())
    }

    /// Stable 32-bit hash of the resolved configuration.
    pub fn hash(&self) -> u32 {
        crc32fast::hash(self.to_toml().unwrap_or_default().as_bytes())
    }

    /// Applies a `key=value` override such as `attention=axial` or
    /// `vqgan.codebook_size=512`. Bare keys are looked up in the `vqgan`,
    /// `prior` and `stage2` tables in that order.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::config(spec, "override must look like key=value"))?;
        let mut doc: toml::Table = toml::from_str(&self.to_toml()?).map_err(|e| Error::config(key, e.to_string()))?;
        let path: Vec<&str> = if key.contains('.') {
            key.split('.').collect()
        } else {
            let table = ["vqgan", "prior", "stage2", "stage1", "sample"]
                .into_iter()
                .find(|t| doc.get(*t).and_then(|v| v.as_table()).is_some_and(|t| t.contains_key(key)))
                .ok_or_else(|| Error::config(key, "unknown override key"))?;
            vec![table, key]
        };
        let parsed: toml::Value = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let (last, parents) = path.split_last().expect("nonempty path");
        let mut table = &mut doc;
        for p in parents {
            table = table
                .get_mut(*p)
                .and_then(|v| v.as_table_mut())
                .ok_or_else(|| Error::config(key, format!("no table `{p}`")))?;
        }
        if !table.contains_key(*last) {
            return Err(Error::config(key, "unknown override key"));
        }
        table.insert(last.to_string(), parsed);
        let text = toml::to_string(&doc).map_err(|e| Error::config(key, e.to_string()))?;
        *self = Self::parse(&text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMOKE: &str = include_str!("../../../configs/smoke.toml");

    #[test]
    fn smoke_config_parses_and_echo_round_trips() {
        let cfg = Config::parse(SMOKE).unwrap();
        let again = Config::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_key_reports_its_path() {
        let text = SMOKE.replace("[vqgan]\n", "[vqgan]\nbogus = 1\n");
        match Config::parse(&text) {
            Err(Error::Config { path, .. }) => assert!(path.starts_with("vqgan"), "{path}"),
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn missing_key_is_rejected() {
        let text = SMOKE.replace("beta = 0.25\n", "");
        assert!(matches!(Config::parse(&text), Err(Error::Config { .. })));
    }

    #[test]
    fn overrides() {
        let mut cfg = Config::parse(SMOKE).unwrap();
        cfg.apply_override("attention=axial").unwrap();
        assert_eq!(cfg.vqgan.attention, crate::vqgan::AttentionKind::Axial);
        cfg.apply_override("vqgan.codebook_size=512").unwrap();
        assert_eq!(cfg.vqgan.codebook_size, 512);
        cfg.apply_override("mask=causal").unwrap();
        assert_eq!(cfg.prior.mask, crate::prior::MaskKind::Causal);
        assert!(cfg.apply_override("attention=sideways").is_err());
        assert!(cfg.apply_override("nonsense=1").is_err());
    }
}
