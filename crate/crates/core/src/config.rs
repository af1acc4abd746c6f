//! Run configuration: one TOML document with a section per component, plus
//! `section.key=value` overrides applied on top.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversarial::VaeGanConfig;
use crate::csnet::CsNetConfig;
use crate::dataio::SyntheticSpec;
use crate::error::{Error, Result};
use crate::pipeline::EvalConfig;
use crate::trainer::{ModelConfig, TrainConfig};

/// Environment variable naming the default dataset bundle.
pub const DATA_ROOT_ENV: &str = "VSUM_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Target dataset bundle; falls back to `$VSUM_DATA_ROOT`.
    pub data: Option<PathBuf>,
    /// Auxiliary bundles for the augmented and transfer settings.
    pub aux: Vec<PathBuf>,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data: None,
            aux: Vec::new(),
            out: PathBuf::from("runs"),
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Training seeds; every configuration runs once per seed.
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlotConfig {
    /// Videos to plot; empty means the first `max_videos`.
    pub videos: Vec<String>,
    pub max_videos: usize,
    pub width: usize,
    pub height: usize,
}

impl Default for PlotConfig {
    fn default() -> Self {
        PlotConfig {
            videos: Vec::new(),
            max_videos: 4,
            width: 900,
            height: 260,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub synth: SyntheticSpec,
    /// `csnet.input_dim = 0` takes the dimension from the data.
    pub csnet: CsNetConfig,
    pub vaegan: VaeGanConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub plot: PlotConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: PathsConfig::default(),
            synth: SyntheticSpec::default(),
            csnet: CsNetConfig {
                input_dim: 0,
                ..CsNetConfig::default()
            },
            vaegan: VaeGanConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
            plot: PlotConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn check(&self) -> Result<()> {
        let mut cs = self.csnet.clone();
        if cs.input_dim == 0 {
            cs.input_dim = 1;
        }
        cs.check()?;
        self.vaegan.check()?;
        self.train.check()?;
        self.eval.check()?;
        self.synth.check()?;
        if self.ablate.seeds.is_empty() {
            return Err(Error::Config("ablate.seeds must not be empty".into()));
        }
        Ok(())
    }

    /// Model configuration for features of dimension `dim`.
    pub fn model_config(&self, dim: usize) -> Result<ModelConfig> {
        let mut csnet = self.csnet.clone();
        if csnet.input_dim == 0 {
            csnet.input_dim = dim;
        } else if csnet.input_dim != dim {
            return Err(Error::Config(format!(
                "csnet.input_dim is {} but the data has dimension {dim}",
                csnet.input_dim
            )));
        }
        let m = ModelConfig {
            csnet,
            vaegan: self.vaegan.clone(),
        };
        m.check()?;
        Ok(m)
    }

    /// Target bundle path from the config or the environment.
    pub fn data_path(&self) -> Result<PathBuf> {
        if let Some(p) = &self.paths.data {
            return Ok(p.clone());
        }
        std::env::var_os(DATA_ROOT_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| {
                Error::Config(format!("no paths.data given and {DATA_ROOT_ENV} is unset"))
            })
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `key` (dot-separated) in `table`, creating intermediate tables.
fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key '{key}'")));
    }
    let (last, inner) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for p in inner {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{p}' is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Splits `section.key=value` (leading dashes allowed) into key and value.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let body = arg.trim_start_matches('-');
    let (k, v) = body.split_once('=').ok_or_else(|| {
        Error::Config(format!(
            "override '{arg}' is not of the form section.key=value"
        ))
    })?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Reads the TOML file (if any), applies overrides, and validates.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<toml::Table>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for (k, v) in overrides {
        set_path(&mut table, k, parse_value(v))?;
    }
    if let Some(cs) = table.get_mut("csnet").and_then(|v| v.as_table_mut()) {
        cs.entry("input_dim").or_insert(toml::Value::Integer(0));
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.check()?;
    Ok(cfg)
}
