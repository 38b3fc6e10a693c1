//! DenseNet variants with 4-way heads and optional ImageNet initialisation.

mod checkpoint;
mod densenet;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::NUM_CLASSES;
use densenet::{final_spatial, DenseNet, ParamStore};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};

/// Directory searched for `<variant_name>.safetensors` ImageNet weights when
/// no explicit path is given.
pub const WEIGHTS_DIR_ENV: &str = "ADENS_WEIGHTS_DIR";

/// Depth of a DenseNet-BC: the stem conv, the three transitions and the
/// classifier (5) plus two convolutions (1x1 and 3x3) per dense layer.
pub fn densenet_depth(block_layers: &[usize; 4]) -> usize {
    5 + 2 * block_layers.iter().sum::<usize>()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseNetConfig {
    pub variant_name: String,
    pub block_layers: [usize; 4],
    pub growth_rate: usize,
    pub init_features: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default)]
    pub pretrained: bool,
    /// Train only the classifier head.
    #[serde(default)]
    pub freeze_backbone: bool,
}

fn default_num_classes() -> usize {
    NUM_CLASSES
}

impl DenseNetConfig {
    pub fn densenet121() -> Self {
        Self::reference("densenet121", [6, 12, 24, 16], 32, 64)
    }

    pub fn densenet161() -> Self {
        Self::reference("densenet161", [6, 12, 36, 24], 48, 96)
    }

    pub fn densenet169() -> Self {
        Self::reference("densenet169", [6, 12, 32, 32], 32, 64)
    }

    /// The three ensemble members, in order.
    pub fn canonical() -> [Self; 3] {
        [Self::densenet121(), Self::densenet161(), Self::densenet169()]
    }

    pub fn by_name(name: &str) -> Option<Self> {
        Self::canonical().into_iter().find(|c| c.variant_name == name)
    }

    fn reference(name: &str, block_layers: [usize; 4], growth_rate: usize, init_features: usize) -> Self {
        Self {
            variant_name: name.to_string(),
            block_layers,
            growth_rate,
            init_features,
            num_classes: NUM_CLASSES,
            pretrained: true,
            freeze_backbone: false,
        }
    }

    /// A small randomly initialised network for desk-scale runs.
    pub fn tiny(block_layers: [usize; 4], growth_rate: usize, init_features: usize) -> Self {
        Self {
            variant_name: format!("tiny{}", densenet_depth(&block_layers)),
            block_layers,
            growth_rate,
            init_features,
            num_classes: NUM_CLASSES,
            pretrained: false,
            freeze_backbone: false,
        }
    }

    pub fn depth(&self) -> usize {
        densenet_depth(&self.block_layers)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_layers.iter().any(|&n| n == 0) {
            return Err(Error::ConfigMismatch(format!("{}: every block needs at least one layer", self.variant_name)));
        }
        if self.growth_rate == 0 || self.init_features == 0 {
            return Err(Error::ConfigMismatch(format!("{}: growth rate and init features must be positive", self.variant_name)));
        }
        if self.num_classes < 2 {
            return Err(Error::ConfigMismatch(format!("{}: need at least 2 classes", self.variant_name)));
        }
        // A trailing number in the name declares the depth.
        let digits: String = self.variant_name.chars().rev().take_while(char::is_ascii_digit).collect();
        if !digits.is_empty() {
            let declared: usize = digits.chars().rev().collect::<String>().parse().unwrap_or(usize::MAX);
            if declared != self.depth() {
                return Err(Error::ConfigMismatch(format!(
                    "{} declares depth {declared} but blocks {:?} give {}",
                    self.variant_name,
                    self.block_layers,
                    self.depth()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct BuildOptions {
    /// Seed for the fresh initialisation (the head always, the backbone when
    /// not pretrained).
    pub seed: u64,
    /// Explicit ImageNet weights file; otherwise looked up under
    /// [`WEIGHTS_DIR_ENV`].
    pub weights_path: Option<PathBuf>,
}

/// A constructed network and its parameters.
pub struct ModelHandle {
    config: DenseNetConfig,
    net: DenseNet,
    vars: BTreeMap<String, Var>,
    trainable: Vec<String>,
}

impl std::fmt::Debug for ModelHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelHandle")
            .field("config", &self.config)
            .field("param_count", &self.param_count())
            .finish()
    }
}

fn is_head(name: &str) -> bool {
    name.starts_with("classifier.")
}

fn resolve_weights(config: &DenseNetConfig, opts: &BuildOptions) -> Result<PathBuf> {
    let unavailable = |reason: String| Error::WeightsUnavailable { variant: config.variant_name.clone(), reason };
    let path = match &opts.weights_path {
        Some(p) => p.clone(),
        None => {
            let dir = std::env::var_os(WEIGHTS_DIR_ENV)
                .ok_or_else(|| unavailable(format!("no weights path given and {WEIGHTS_DIR_ENV} is unset")))?;
            Path::new(&dir).join(format!("{}.safetensors", config.variant_name))
        }
    };
    if !path.is_file() {
        return Err(unavailable(format!("{} does not exist", path.display())));
    }
    Ok(path)
}

pub fn build_densenet(config: &DenseNetConfig, opts: &BuildOptions) -> Result<ModelHandle> {
    config.validate()?;
    let weights = if config.pretrained { Some(resolve_weights(config, opts)?) } else { None };

    let mut store = ParamStore::new(ChaCha8Rng::seed_from_u64(opts.seed));
    let net = DenseNet::new(
        &mut store,
        &config.block_layers,
        config.growth_rate,
        config.init_features,
        config.num_classes,
    )?;
    let handle = ModelHandle { config: config.clone(), net, vars: store.vars, trainable: store.trainable };

    if let Some(path) = weights {
        let unavailable = |reason: String| Error::WeightsUnavailable { variant: config.variant_name.clone(), reason };
        let file = candle_core::safetensors::load(&path, &Device::Cpu)
            .map_err(|e| unavailable(format!("{}: {e}", path.display())))?;
        for (name, var) in handle.vars.iter().filter(|(n, _)| !is_head(n)) {
            let t = file.get(name).ok_or_else(|| unavailable(format!("{} lacks {name}", path.display())))?;
            if t.dims() != var.dims() {
                return Err(unavailable(format!("{name} has shape {:?}, expected {:?}", t.dims(), var.dims())));
            }
            var.set(&t.to_dtype(candle_core::DType::F32)?)?;
        }
    }
    Ok(handle)
}

impl ModelHandle {
    pub fn config(&self) -> &DenseNetConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Width of the pooled feature vector feeding the classifier.
    pub fn feature_dim(&self) -> usize {
        self.net.feature_dim()
    }

    pub fn weighted_layer_count(&self) -> usize {
        self.net.weighted_layer_count()
    }

    pub fn block_input_channels(&self) -> Vec<usize> {
        self.net.block_input_channels()
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.trainable.iter().map(|n| self.vars[n].elem_count()).sum()
    }

    pub fn head_param_count(&self) -> usize {
        self.trainable.iter().filter(|n| is_head(n)).map(|n| self.vars[n].elem_count()).sum()
    }

    /// Smallest square input the stem and transitions accept.
    pub fn min_input_side() -> usize {
        (1..).find(|&s| final_spatial(s).is_some()).expect("some side fits")
    }

    /// Logits of shape (B, num_classes) for a (B, 3, side, side) batch.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let dims = x.dims();
        if dims.len() != 4 || dims[1] != 3 || dims[2] != dims[3] || final_spatial(dims[2]).is_none() {
            return Err(Error::ShapeMismatch(format!(
                "expected (B, 3, side, side) with side >= {}, got {dims:?}",
                Self::min_input_side()
            )));
        }
        self.net.forward(x, train)
    }

    /// Variables the optimiser updates, in name order.
    pub fn trainable_vars(&self) -> Vec<Var> {
        self.trainable
            .iter()
            .filter(|n| !self.config.freeze_backbone || is_head(n))
            .map(|n| self.vars[n].clone())
            .collect()
    }

    pub fn named_var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn var_names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    /// Deep copy of every parameter and running statistic.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::ShapeMismatch(format!("snapshot lacks {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::ShapeMismatch(format!("{name}: {:?} vs {:?}", t.dims(), var.dims())));
            }
            var.set(t)?;
        }
        Ok(())
    }
}
