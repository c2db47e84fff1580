//! Single-file run configuration with dotted overrides and run manifests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_synthetic, load_binary_images, BinaryLayout, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::experiments::ReliabilityConfig;
use crate::model::{Family, ModelSpec};
use crate::trainer::{EarlyBirdConfig, PipelineConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinaryFiles {
    pub train_path: PathBuf,
    pub val_path: PathBuf,
    pub layout: BinaryLayout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub synthetic: SyntheticSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub binary: Option<BinaryFiles>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            synthetic: SyntheticSpec::default(),
            binary: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub group_fractions: Vec<f64>,
    pub data_fractions: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub eval_batch: usize,
    pub importance_batch: usize,
    /// Validation examples used as the partial-correlation probe.
    pub probe: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let r = ReliabilityConfig::default();
        ExperimentConfig {
            group_fractions: r.group_fractions,
            data_fractions: r.data_fractions,
            trials: r.trials,
            seed: r.seed,
            eval_batch: r.batch,
            importance_batch: r.importance_batch,
            probe: 128,
        }
    }
}

impl ExperimentConfig {
    pub fn reliability(&self) -> ReliabilityConfig {
        ReliabilityConfig {
            group_fractions: self.group_fractions.clone(),
            data_fractions: self.data_fractions.clone(),
            trials: self.trials,
            seed: self.seed,
            batch: self.eval_batch,
            importance_batch: self.importance_batch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelSpec,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub ebt: EarlyBirdConfig,
    #[serde(default)]
    pub experiments: ExperimentConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            model: ModelSpec::new(Family::Plain, &[8, 16, 32], 4, 0),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            pipeline: PipelineConfig::default(),
            ebt: EarlyBirdConfig::default(),
            experiments: ExperimentConfig::default(),
        }
    }
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(root: &mut toml::Table, path: &[&str], value: toml::Value) -> Result<()> {
    let (last, parents) = path
        .split_last()
        .ok_or_else(|| Error::Config(vec!["empty override key".into()]))?;
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            Error::Config(vec![format!(
                "override path component `{p}` is not a table"
            )])
        })?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_table(
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(vec![one_line(&e.to_string())]))?,
        )
    }

    fn from_table(t: toml::Table) -> Result<Self> {
        Config::deserialize(t).map_err(|e| Error::Config(vec![one_line(&e.to_string())]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    /// Applies `section.key=value` overrides in order.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut table: toml::Table = self
            .to_toml()?
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        for o in overrides {
            let (key, value) = o.split_once('=').ok_or_else(|| {
                Error::Config(vec![format!(
                    "override `{o}` is not of the form section.key=value"
                )])
            })?;
            let path: Vec<&str> = key.trim().split('.').collect();
            if path.len() < 2 || path.iter().any(|p| p.is_empty()) {
                return Err(Error::Config(vec![format!(
                    "override key `{key}` needs a section"
                )]));
            }
            set_path(&mut table, &path, parse_value(value.trim()))?;
        }
        Self::from_table(table)
    }

    /// Every violated constraint across all sections.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if let Err(Error::Config(m)) = self.model.validate() {
            p.extend(m);
        }
        match self.data.source {
            DataSource::Synthetic => {
                p.extend(self.data.synthetic.problems());
                if self.data.synthetic.classes != self.model.classes {
                    p.push(format!(
                        "data.synthetic.classes ({}) differs from model.classes ({})",
                        self.data.synthetic.classes, self.model.classes
                    ));
                }
                if self.data.synthetic.channels != self.model.in_channels {
                    p.push("data.synthetic.channels differs from model.in_channels".into());
                }
            }
            DataSource::Binary => match &self.data.binary {
                None => p.push("data.source = \"binary\" requires a [data.binary] section".into()),
                Some(b) => {
                    if b.layout.classes != self.model.classes {
                        p.push("data.binary.layout.classes differs from model.classes".into());
                    }
                    if b.layout.channels != self.model.in_channels {
                        p.push("data.binary.layout.channels differs from model.in_channels".into());
                    }
                }
            },
        }
        p.extend(self.train.problems("train"));
        p.extend(self.pipeline.problems());
        if !(self.ebt.pretrain_fraction > 0.0 && self.ebt.pretrain_fraction <= 0.5) {
            p.push("ebt.pretrain_fraction must lie in (0, 0.5]".into());
        }
        if !(0.0..1.0).contains(&self.ebt.prune_fraction) {
            p.push("ebt.prune_fraction must lie in [0, 1)".into());
        }
        p.extend(self.experiments.reliability().problems());
        if self.experiments.probe == 0 {
            p.push("experiments.probe must be >= 1".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    pub fn load_data(&self) -> Result<Split> {
        match self.data.source {
            DataSource::Synthetic => generate_synthetic(&self.data.synthetic),
            DataSource::Binary => {
                let b =
                    self.data.binary.as_ref().ok_or_else(|| {
                        Error::Config(vec!["missing [data.binary] section".into()])
                    })?;
                Ok(Split {
                    train: load_binary_images(&b.train_path, &b.layout)?,
                    val: load_binary_images(&b.val_path, &b.layout)?,
                })
            }
        }
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

pub(crate) fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<(String, u64)>,
    pub overrides: Vec<String>,
    pub versions: Vec<(String, String)>,
    pub outputs: Vec<String>,
    pub config: String,
}

impl Manifest {
    pub fn new(command: &str, cfg: &Config, overrides: &[String]) -> Result<Self> {
        Ok(Manifest {
            command: command.to_string(),
            config_hash: cfg.hash()?,
            seeds: vec![
                ("model".into(), cfg.model.seed),
                ("data".into(), cfg.data.synthetic.seed),
                ("train".into(), cfg.train.seed),
                ("experiments".into(), cfg.experiments.seed),
            ],
            overrides: overrides.to_vec(),
            versions: vec![
                ("orthoprune".into(), env!("CARGO_PKG_VERSION").into()),
                ("manifest".into(), "1".into()),
            ],
            outputs: Vec::new(),
            config: cfg.to_toml()?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ortho::OrthoConfig;

    #[test]
    fn default_round_trips() {
        let cfg = Config::default();
        let text = cfg.to_toml().unwrap();
        let back = Config::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn customized_round_trips() {
        let mut cfg = Config::default();
        cfg.train.milestones = vec![(10, 1e-4), (20, 1e-5)];
        cfg.train.ortho = OrthoConfig::new(0.02);
        cfg.pipeline.fractions = vec![0.3, 0.2];
        cfg.pipeline.rounds = 2;
        cfg.pipeline.lambda = Some(0.005);
        cfg.model = ModelSpec::new(Family::Residual, &[8, 16], 4, 9).with_blocks(&[2, 1]);
        let back = Config::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = Config::default()
            .with_overrides(&[
                "train.lr=0.05".into(),
                "train.ortho.enabled=true".into(),
                "model.family=residual".into(),
                "pipeline.fractions=[0.2, 0.1]".into(),
                "pipeline.rounds=2".into(),
            ])
            .unwrap();
        assert_eq!(cfg.train.lr, 0.05);
        assert!(cfg.train.ortho.enabled);
        assert_eq!(cfg.model.family, Family::Residual);
        assert_eq!(cfg.pipeline.fractions, vec![0.2, 0.1]);
        assert!(Config::default().with_overrides(&["nokey".into()]).is_err());
        assert!(Config::default()
            .with_overrides(&["train.bogus=1".into()])
            .is_err());
    }

    #[test]
    fn lists_every_violation() {
        let cfg = Config::default()
            .with_overrides(&[
                "train.weight_decay=0.0005".into(),
                "train.ortho.enabled=true".into(),
                "model.classes=1".into(),
                "pipeline.rounds=0".into(),
            ])
            .unwrap();
        let p = cfg.problems();
        assert!(p.iter().any(|m| m.contains("weight_decay")));
        assert!(p.iter().any(|m| m.contains("model.classes")));
        assert!(p.iter().any(|m| m.contains("pipeline.rounds")));
        assert!(p.iter().any(|m| m.contains("differs from model.classes")));
    }

    #[test]
    fn manifest_records_hash() {
        let cfg = Config::default();
        let m = Manifest::new("train", &cfg, &[]).unwrap();
        assert_eq!(m.config_hash.len(), 64);
        let other = cfg.with_overrides(&["train.lr=0.5".into()]).unwrap();
        assert_ne!(
            Manifest::new("train", &other, &[]).unwrap().config_hash,
            m.config_hash
        );
    }
}
