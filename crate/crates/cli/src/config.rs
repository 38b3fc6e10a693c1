//! The run configuration: one JSON document describing data, preprocessing,
//! splits, the three models and the vote.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use adens_core::ingest::SyntheticCohortSpec;
use adens_core::preprocess::{DEFAULT_SIDE, DEFAULT_WINDOW};
use adens_core::splits::{DEFAULT_FOLDS, DEFAULT_VAL_RATIO};
use adens_core::{DenseNetConfig, ModelHandle, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

pub const REFERENCE_MODELS: [&str; 3] = ["densenet121", "densenet161", "densenet169"];
pub const ENSEMBLE_SIZE: usize = adens_core::ensemble::ENSEMBLE_SIZE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub data: DataSource,
    /// Patch cache location; `ADENS_CACHE_DIR` takes precedence, the
    /// default is `<output_dir>/cache`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// Directory of `<variant>.safetensors` ImageNet weights; falls back to
    /// `ADENS_WEIGHTS_DIR`.
    #[serde(default)]
    pub weights_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub preprocess: PreprocessParams,
    #[serde(default)]
    pub split: SplitParams,
    /// Training defaults shared by every model; each model may override keys.
    #[serde(default)]
    pub train: Map<String, Value>,
    pub models: Vec<ModelEntry>,
    #[serde(default)]
    pub ensemble: EnsembleParams,
    /// Train the models of a fold on separate threads.
    #[serde(default)]
    pub parallel: bool,
    #[serde(default = "default_predict_batch")]
    pub predict_batch_size: usize,
}

fn default_predict_batch() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    #[serde(default)]
    pub metadata: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticCohortSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessParams {
    pub window: usize,
    pub side: usize,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        Self { window: DEFAULT_WINDOW, side: DEFAULT_SIDE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitParams {
    pub k: usize,
    pub seed: u64,
    /// Share of each fold's non-test subjects held out for early stopping.
    pub val_ratio: f64,
}

impl Default for SplitParams {
    fn default() -> Self {
        Self { k: DEFAULT_FOLDS, seed: 0, val_ratio: DEFAULT_VAL_RATIO }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Voting {
    #[default]
    Hard,
    Soft,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleParams {
    pub voting: Voting,
}

/// A model is either a named variant (`densenet121`, ...) or a custom
/// DenseNet given by its block sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub id: String,
    /// Named variant; defaults to `id` when no custom shape is given.
    #[serde(default)]
    pub variant: Option<String>,
    #[serde(default)]
    pub block_layers: Option<[usize; 4]>,
    #[serde(default)]
    pub growth_rate: Option<usize>,
    #[serde(default)]
    pub init_features: Option<usize>,
    #[serde(default)]
    pub pretrained: Option<bool>,
    #[serde(default)]
    pub freeze_backbone: bool,
    #[serde(default)]
    pub train: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedModel {
    pub id: String,
    pub config: DenseNetConfig,
    pub train: TrainConfig,
}

impl ModelEntry {
    fn resolve(&self, shared_train: &Map<String, Value>) -> Result<ResolvedModel, Vec<String>> {
        let mut errors = Vec::new();
        let custom = self.block_layers.is_some() || self.growth_rate.is_some() || self.init_features.is_some();
        let mut config = match (&self.variant, custom) {
            (Some(_), true) => {
                errors.push("give either variant or block_layers/growth_rate/init_features, not both".into());
                None
            }
            (_, true) => match (self.block_layers, self.growth_rate, self.init_features) {
                (Some(b), Some(g), Some(i)) => Some(DenseNetConfig::tiny(b, g, i)),
                _ => {
                    errors.push("a custom model needs block_layers, growth_rate and init_features".into());
                    None
                }
            },
            (variant, false) => {
                let name = variant.as_deref().unwrap_or(&self.id);
                let found = DenseNetConfig::by_name(name);
                if found.is_none() {
                    errors.push(format!("unknown variant '{name}' (expected one of {})", REFERENCE_MODELS.join(", ")));
                }
                found
            }
        };
        if let Some(c) = config.as_mut() {
            if let Some(p) = self.pretrained {
                c.pretrained = p;
            }
            c.freeze_backbone = self.freeze_backbone;
            if c.freeze_backbone && !c.pretrained {
                errors.push("freeze_backbone requires pretrained weights".into());
            }
            if let Err(e) = c.validate() {
                errors.push(e.to_string());
            }
        }

        let mut merged = shared_train.clone();
        merged.extend(self.train.clone());
        let train = match serde_json::from_value::<TrainConfig>(Value::Object(merged)) {
            Ok(t) => {
                errors.extend(t.validate().into_iter().map(|e| format!("train: {e}")));
                Some(t)
            }
            Err(e) => {
                errors.push(format!("train: {e}"));
                None
            }
        };
        match (config, train) {
            (Some(config), Some(train)) if errors.is_empty() => Ok(ResolvedModel { id: self.id.clone(), config, train }),
            _ => Err(errors),
        }
    }
}

impl RunConfig {
    /// Parse a config file and make its relative paths relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::ConfigInvalid(vec![format!("{}: {e}", path.display())]))?;
        let mut config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::ConfigInvalid(vec![format!("{}: {e}", path.display())]))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut config.output_dir);
        config.data.metadata.as_mut().map(rebase);
        config.cache_dir.as_mut().map(rebase);
        config.weights_dir.as_mut().map(rebase);
        Ok(config)
    }

    pub fn resolve_models(&self) -> Result<Vec<ResolvedModel>, Vec<String>> {
        let mut errors = Vec::new();
        let mut resolved = Vec::new();
        for (i, m) in self.models.iter().enumerate() {
            match m.resolve(&self.train) {
                Ok(r) => resolved.push(r),
                Err(es) => errors.extend(es.into_iter().map(|e| format!("models[{i}] ({}): {e}", m.id))),
            }
        }
        if errors.is_empty() {
            Ok(resolved)
        } else {
            Err(errors)
        }
    }

    /// Every violation, not just the first.
    pub fn validate(&self, paper_mode: bool) -> Vec<String> {
        let mut errors = Vec::new();
        match (&self.data.metadata, &self.data.synthetic) {
            (Some(_), Some(_)) | (None, None) => {
                errors.push("data: give exactly one of data.metadata or data.synthetic".into())
            }
            (Some(p), None) if !p.is_file() => errors.push(format!("data.metadata: {} does not exist", p.display())),
            (None, Some(s)) => {
                if let Err(e) = adens_core::ingest::label_counts_for(s.n_subjects, s.class_proportions) {
                    errors.push(format!("data.synthetic: {e}"));
                }
                if s.shape.iter().any(|&d| d < self.preprocess.window) {
                    errors.push(format!(
                        "data.synthetic.shape {:?}: every axis must hold preprocess.window = {} slices",
                        s.shape, self.preprocess.window
                    ));
                }
                if s.n_subjects < self.split.k {
                    errors.push(format!("data.synthetic.n_subjects {} is below split.k = {}", s.n_subjects, self.split.k));
                }
            }
            _ => {}
        }
        if let Some(w) = &self.weights_dir {
            if !w.is_dir() {
                errors.push(format!("weights_dir: {} does not exist", w.display()));
            }
        }
        if self.preprocess.window == 0 {
            errors.push("preprocess.window must be at least 1".into());
        }
        let min_side = ModelHandle::min_input_side();
        if self.preprocess.side < min_side {
            errors.push(format!("preprocess.side {} is below the network minimum {min_side}", self.preprocess.side));
        }
        if self.split.k < 2 {
            errors.push(format!("split.k must be at least 2, got {}", self.split.k));
        }
        if !(self.split.val_ratio > 0.0 && self.split.val_ratio < 1.0) {
            errors.push(format!("split.val_ratio must be in (0, 1), got {}", self.split.val_ratio));
        }
        if self.predict_batch_size == 0 {
            errors.push("predict_batch_size must be positive".into());
        }
        if self.models.len() != ENSEMBLE_SIZE {
            errors.push(format!("models: expected exactly {ENSEMBLE_SIZE} entries, got {}", self.models.len()));
        }
        let mut seen = BTreeSet::new();
        for m in &self.models {
            if m.id.is_empty() || !m.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                errors.push(format!("models: id '{}' must be non-empty [A-Za-z0-9_-]", m.id));
            }
            if !seen.insert(m.id.as_str()) {
                errors.push(format!("models: duplicate id '{}'", m.id));
            }
        }
        if let Err(es) = self.resolve_models() {
            errors.extend(es);
        }
        if paper_mode {
            for name in REFERENCE_MODELS {
                match self.models.iter().find(|m| m.id == name) {
                    None => errors.push(format!("models: missing entry '{name}' (required by --paper-mode)")),
                    Some(m) if m.variant.as_deref().is_some_and(|v| v != name) || m.block_layers.is_some() => {
                        errors.push(format!("models.{name}: --paper-mode requires the {name} architecture"))
                    }
                    Some(_) => {}
                }
            }
            if self.split.k != DEFAULT_FOLDS {
                errors.push(format!("split.k: --paper-mode requires {DEFAULT_FOLDS}, got {}", self.split.k));
            }
            if self.split.val_ratio != DEFAULT_VAL_RATIO {
                errors.push(format!(
                    "split.val_ratio: --paper-mode requires {DEFAULT_VAL_RATIO} (70/10/20), got {}",
                    self.split.val_ratio
                ));
            }
            if self.ensemble.voting != Voting::Hard {
                errors.push("ensemble.voting: --paper-mode requires hard voting".into());
            }
        }
        errors
    }

    pub fn metadata_path(&self) -> PathBuf {
        match &self.data.metadata {
            Some(p) => p.clone(),
            None => self.synthetic_dir().join("metadata.csv"),
        }
    }

    pub fn synthetic_dir(&self) -> PathBuf {
        self.output_dir.join("synthetic")
    }

    pub fn cache_dir(&self) -> PathBuf {
        std::env::var_os(crate::CACHE_DIR_ENV)
            .map(PathBuf::from)
            .or_else(|| self.cache_dir.clone())
            .unwrap_or_else(|| self.output_dir.join("cache"))
    }

    pub fn weights_path(&self, config: &DenseNetConfig) -> Option<PathBuf> {
        let dir = self
            .weights_dir
            .clone()
            .or_else(|| std::env::var_os(adens_core::model::WEIGHTS_DIR_ENV).map(PathBuf::from))?;
        Some(dir.join(format!("{}.safetensors", config.variant_name)))
    }
}
