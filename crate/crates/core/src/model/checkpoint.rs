use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{build_densenet, BuildOptions, DenseNetConfig, ModelHandle};
use crate::error::{Error, Result};

/// Sidecar JSON written next to each checkpoint's tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_id: String,
    pub config: DenseNetConfig,
    pub fold: usize,
    pub timestamp: String,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Training configuration and anything else the trainer wants recorded.
    #[serde(default)]
    pub training: serde_json::Value,
}

impl CheckpointMeta {
    /// `{variant}_{fold}_{timestamp}`
    pub fn file_stem(&self) -> String {
        format!("{}_{}_{}", self.config.variant_name, self.fold, self.timestamp)
    }
}

/// Write `tensors` and `meta` under `dir`. Returns the safetensors path.
pub fn save_checkpoint(dir: &Path, tensors: &BTreeMap<String, Tensor>, meta: &CheckpointMeta) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let stem = meta.file_stem();
    let path = dir.join(format!("{stem}.safetensors"));
    let map: HashMap<&str, Tensor> = tensors.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    candle_core::safetensors::save(&map, &path)?;
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(meta)?)?;
    Ok(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelHandle, CheckpointMeta)> {
    let meta_path = path.with_extension("json");
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    if !meta_path.is_file() {
        return Err(Error::MissingFile(meta_path));
    }
    let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
    let mut config = meta.config.clone();
    config.pretrained = false;
    let model = build_densenet(&config, &BuildOptions::default())?;
    let tensors: BTreeMap<String, Tensor> = candle_core::safetensors::load(path, &Device::Cpu)?.into_iter().collect();
    model.restore(&tensors)?;
    Ok((model, meta))
}
