use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mimo_fm::adaptation::AdaptConfig;
use mimo_fm::channelgen::EnvironmentSpec;
use mimo_fm::nn::ModelHyper;
use mimo_fm::phy::SystemConfig;
use mimo_fm::training::TrainConfig;

use crate::error::CliError;

/// Environment variable that overrides `paths.report_dir`.
pub const REPORT_DIR_ENV: &str = "MIMO_FM_REPORT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Single-user channels generated per environment.
    pub samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { samples: 5000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Environments kept out of training and used as deployment sites.
    pub deploy_sites: Vec<String>,
    /// Share of a deployment site's channels reserved for evaluation.
    pub holdout_fraction: f64,
    /// Local channels a few-shot deployment may use.
    pub few_shot_channels: usize,
    /// CSIs per evaluation.
    pub n_eval: usize,
    pub sweep_points: usize,
    /// WMMSE iterations in the FLOP comparison.
    pub wmmse_iterations: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            deploy_sites: Vec::new(),
            holdout_fraction: 0.5,
            few_shot_channels: 10,
            n_eval: 1000,
            sweep_points: 10_000,
            wmmse_iterations: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            checkpoint_dir: "checkpoints".into(),
            report_dir: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub data: DataConfig,
    pub channel: Vec<EnvironmentSpec>,
    pub model: ModelHyper,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}


fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

/// `key=value` with a dotted key; array elements are addressed by index.
/// Values are read as TOML and fall back to a bare string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {assignment:?}")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad key {key:?}")));
    }
    let mut node = root;
    for part in &parts {
        node = match node {
            toml::Value::Table(t) => t
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new())),
            toml::Value::Array(a) => {
                let len = a.len();
                part.parse::<usize>()
                    .ok()
                    .and_then(|i| a.get_mut(i))
                    .ok_or_else(|| {
                        CliError::Config(format!("{part:?} is not an index below {len} in {key:?}"))
                    })?
            }
            _ => return Err(CliError::Config(format!("{key:?} descends into a scalar"))),
        };
    }
    *node = value;
    Ok(())
}

impl RunConfig {
    /// Parses `text`, applies `overrides` in order and validates the result.
    pub fn resolve(text: &str, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let table: toml::Table = text.parse().map_err(config_err)?;
        let mut root = toml::Value::Table(table);
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let mut cfg: RunConfig = root.try_into().map_err(config_err)?;
        if let Some(s) = seed {
            cfg.train.seed = s;
            cfg.adapt.seed = s;
            cfg.eval.seed = s;
        }
        cfg.model = cfg.model.clone().with_system(&cfg.system);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::resolve(&text, overrides, seed)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.system.validate().map_err(config_err)?;
        self.model.validate().map_err(config_err)?;
        self.train.validate().map_err(config_err)?;
        self.adapt.validate().map_err(config_err)?;
        let mut ids = std::collections::BTreeSet::new();
        for spec in &self.channel {
            spec.validate().map_err(config_err)?;
            if !ids.insert(spec.env_id.as_str()) {
                return Err(CliError::Config(format!(
                    "duplicate env_id {:?}",
                    spec.env_id
                )));
            }
        }
        for site in &self.eval.deploy_sites {
            if !ids.contains(site.as_str()) {
                return Err(CliError::Config(format!(
                    "deploy site {site:?} is not a channel env_id"
                )));
            }
        }
        if self.training_specs().next().is_none() && !self.channel.is_empty() {
            return Err(CliError::Config(
                "every environment is a deploy site; nothing to train on".into(),
            ));
        }
        if !(self.eval.holdout_fraction > 0.0 && self.eval.holdout_fraction < 1.0) {
            return Err(CliError::Config(
                "eval.holdout_fraction must lie in (0, 1)".into(),
            ));
        }
        if self.eval.n_eval == 0 || self.eval.sweep_points == 0 || self.eval.wmmse_iterations == 0 {
            return Err(CliError::Config("eval sizes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn training_specs(&self) -> impl Iterator<Item = &EnvironmentSpec> {
        self.channel
            .iter()
            .filter(|s| !self.eval.deploy_sites.contains(&s.env_id))
    }

    pub fn deploy_specs(&self) -> impl Iterator<Item = &EnvironmentSpec> {
        self.channel
            .iter()
            .filter(|s| self.eval.deploy_sites.contains(&s.env_id))
    }

    /// The resolved configuration as TOML, exactly as hashed.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the resolved configuration with `paths` reset, so moving
    /// a run to another directory keeps its identity.
    pub fn hash(&self) -> String {
        let canonical = Self {
            paths: PathsConfig::default(),
            ..self.clone()
        };
        let digest = Sha256::digest(canonical.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn report_dir(&self) -> PathBuf {
        match std::env::var_os(REPORT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => dir.into(),
            _ => self.paths.report_dir.clone(),
        }
    }
}
