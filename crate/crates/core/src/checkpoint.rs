//! Checkpoint directories: one `.ten` file per parameter tensor (stored as
//! f32) and `params.json` with the configuration that built the model.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::csnet::ScorerFlags;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::{Model, ModelConfig, TrainConfig};

pub const PARAMS_FILE: &str = "params.json";
pub const FORMAT_TAG: &str = "vsum-checkpoint-1";

const GROUPS: [&str; 3] = ["scorer", "vae", "disc"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub model: ModelConfig,
    pub flags: ScorerFlags,
    pub train: TrainConfig,
    pub seed: u64,
    /// Resolved run configuration the checkpoint was produced with.
    pub config: serde_json::Value,
}

fn stores(model: &Model) -> [&ParamStore; 3] {
    [&model.scorer.store, &model.vae.store, &model.disc.store]
}

pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    train: &TrainConfig,
    config: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (group, store) in GROUPS.iter().zip(stores(model)) {
        for (name, value) in store.iter() {
            let t = Tensor::from_f32_matrix(&value.mapv(|v| v as f32));
            t.write_file(&dir.join(format!("{group}.{name}.ten")))?;
        }
    }
    let meta = CheckpointMeta {
        format: FORMAT_TAG.into(),
        model: model.config.clone(),
        flags: model.flags,
        train: train.clone(),
        seed: train.seed,
        config,
    };
    let path = dir.join(PARAMS_FILE);
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(PARAMS_FILE);
    if !path.is_file() {
        return Err(Error::Format(format!(
            "checkpoint not found: {}",
            dir.display()
        )));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if meta.format != FORMAT_TAG {
        return Err(Error::Format(format!(
            "unknown checkpoint format '{}'",
            meta.format
        )));
    }
    Ok(meta)
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, CheckpointMeta)> {
    let meta = load_meta(dir)?;
    let mut model = Model::new(&meta.model, meta.flags, meta.seed)?;
    let mut named: [BTreeMap<String, _>; 3] = Default::default();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(file) = path.file_name().and_then(|f| f.to_str()) else {
            continue;
        };
        let Some(stem) = file.strip_suffix(".ten") else {
            continue;
        };
        let (group, name) = stem
            .split_once('.')
            .ok_or_else(|| Error::Format(format!("stray tensor file {file}")))?;
        let slot = GROUPS
            .iter()
            .position(|g| *g == group)
            .ok_or_else(|| Error::Format(format!("unknown parameter group in {file}")))?;
        let values = Tensor::read_file(&path)?.into_f32_matrix(name)?;
        named[slot].insert(name.to_string(), values.mapv(f64::from));
    }
    let [s, v, d] = named;
    model.scorer.store.load_from(s)?;
    model.vae.store.load_from(v)?;
    model.disc.store.load_from(d)?;
    if !(model.scorer.store.all_finite()
        && model.vae.store.all_finite()
        && model.disc.store.all_finite())
    {
        return Err(Error::Numeric(
            "checkpoint holds non-finite parameters".into(),
        ));
    }
    Ok((model, meta))
}
