//! Run configuration: a preset, overlaid by an optional TOML file, overlaid
//! by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kbqa_core::kb::KbOptions;
use kbqa_core::synth::SynthConfig;
use kbqa_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

pub const CONFIG_ENV: &str = "KBQA_CONFIG";

/// Where the KB and QA splits live. Unset files default to the names written
/// by `gen` inside `dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub dir: PathBuf,
    pub kb: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

impl Default for DataPaths {
    fn default() -> Self {
        DataPaths { dir: PathBuf::from("data"), kb: None, train: None, valid: None, test: None }
    }
}

impl DataPaths {
    pub fn kb(&self) -> PathBuf {
        self.kb.clone().unwrap_or_else(|| self.dir.join("kb.tsv"))
    }

    /// Path of a named split (`train`, `valid`, `test`).
    pub fn split(&self, name: &str) -> Option<PathBuf> {
        let (set, file) = match name {
            "train" => (&self.train, "train.jsonl"),
            "valid" => (&self.valid, "valid.jsonl"),
            "test" => (&self.test, "test.jsonl"),
            _ => return None,
        };
        Some(set.clone().unwrap_or_else(|| self.dir.join(file)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Preset the file is laid over: `desk` or `full`.
    pub preset: String,
    pub data: DataPaths,
    /// Directory for checkpoints and the metrics log.
    pub out_dir: PathBuf,
    /// Worker threads; unset uses every core.
    pub workers: Option<usize>,
    pub kb: KbOptions,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset("desk").expect("desk preset exists")
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Option<Self> {
        Some(RunConfig {
            preset: name.to_string(),
            data: DataPaths::default(),
            out_dir: PathBuf::from("runs"),
            workers: None,
            kb: KbOptions::default(),
            train: TrainConfig::preset(name)?,
            synth: SynthConfig::default(),
        })
    }

    /// Parses `text` over the preset it names (or `fallback_preset`).
    pub fn from_toml(text: &str, fallback_preset: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
        let name = match user.get("preset") {
            Some(toml::Value::String(s)) => s.clone(),
            Some(other) => bail!("`preset` must be a string, got {other}"),
            None => fallback_preset.to_string(),
        };
        let base = Self::preset(&name).with_context(|| format!("unknown preset `{name}` (expected desk or full)"))?;
        let mut merged = toml::Table::try_from(&base).context("serializing preset")?;
        merge(&mut merged, user);
        let config: RunConfig = toml::Value::Table(merged).try_into().context("invalid configuration")?;
        Ok(config)
    }

    /// Explicit path, else the path in the environment variable, else the preset alone.
    pub fn load(path: Option<&Path>, preset: &str) -> Result<Self> {
        let path = path.map(Path::to_path_buf).or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(&p).with_context(|| format!("reading config {}", p.display()))?;
                Self::from_toml(&text, preset).with_context(|| format!("in config {}", p.display()))
            }
            None => Self::preset(preset).with_context(|| format!("unknown preset `{preset}` (expected desk or full)")),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// Recursively overlays `over` onto `base`; tables merge, everything else replaces.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
