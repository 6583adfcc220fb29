//! Run configuration: embedded defaults, then an optional file, then
//! `--set` overrides, merged key by key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tsedit::denoiser::DenoiserConfig;
use tsedit::diffusion::{ScheduleParams, TrainConfig};
use tsedit::guidance::GuidanceConfig;

use crate::CliError;

pub const DEFAULT_TOML: &str = include_str!("default.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleParams,
    pub train: TrainSection,
    pub guidance: GuidanceConfig,
    pub sweep: SweepSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Number of generated series. Ignored for CSV input.
    pub n: usize,
    pub len: usize,
    pub channels: usize,
    #[serde(default)]
    pub path: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Sines,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Seeds `seed, seed + 1, …` used for every grid cell.
    pub seeds: usize,
}

impl RunConfig {
    /// Builds the configuration from the defaults, an optional file and a
    /// list of `key.path=value` overrides, in that order of precedence.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: toml::Table = DEFAULT_TOML.parse().expect("embedded defaults parse");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let user: toml::Table = text
                .parse()
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut table, user);
        }
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), CliError> {
        if self.data.kind == DataKind::Csv {
            match &self.data.path {
                None => return Err(CliError::Config("data.kind = \"csv\" needs data.path".into())),
                Some(p) if !p.is_file() => {
                    return Err(CliError::Config(format!("data file {} does not exist", p.display())))
                }
                Some(_) => {}
            }
        }
        self.denoiser().validate()?;
        self.guidance.validate()?;
        Ok(())
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            len: self.data.len,
            channels: self.data.channels,
            hidden: self.model.hidden.clone(),
            embed_dim: self.model.embed_dim,
            diffusion_steps: self.schedule.steps,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            momentum: self.train.momentum,
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Applies `a.b.c=value`. The value is parsed as a TOML value and falls
/// back to a plain string, so `data.path=my.csv` works unquoted.
fn apply_override(table: &mut toml::Table, item: &str) -> Result<(), CliError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{item}` is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut node = table;
    for p in parents {
        node = match node.entry(p.to_string()).or_insert_with(|| toml::Table::new().into()) {
            toml::Value::Table(t) => t,
            _ => return Err(CliError::Config(format!("`{p}` in `{key}` is not a section"))),
        };
    }
    node.insert(last.to_string(), value);
    Ok(())
}
