//! DenseNet-BC layers on candle. Parameter names follow the torchvision
//! state-dict layout (`features.denseblock1.denselayer1.norm1.weight`, ...)
//! so converted ImageNet checkpoints load without renaming.

use std::collections::BTreeMap;

use candle_core::{Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

pub(crate) const BN_SIZE: usize = 4;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Named parameters and buffers backing one network.
pub(crate) struct ParamStore {
    pub(crate) vars: BTreeMap<String, Var>,
    /// Names of optimisable tensors; the rest are running statistics.
    pub(crate) trainable: Vec<String>,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub(crate) fn new(rng: ChaCha8Rng) -> Self {
        Self { vars: BTreeMap::new(), trainable: Vec::new(), rng, device: Device::Cpu }
    }

    fn insert(&mut self, name: String, values: Vec<f32>, shape: &[usize], trainable: bool) -> Result<Var> {
        let var = Var::from_tensor(&Tensor::from_vec(values, shape, &self.device)?)?;
        if trainable {
            self.trainable.push(name.clone());
        }
        self.vars.insert(name, var.clone());
        Ok(var)
    }

    /// Kaiming-normal (fan-in, ReLU gain) conv kernel.
    fn conv_weight(&mut self, name: String, out_c: usize, in_c: usize, k: usize) -> Result<Var> {
        let fan_in = (in_c * k * k) as f32;
        let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("positive std");
        let values = (0..out_c * in_c * k * k).map(|_| normal.sample(&mut self.rng)).collect();
        self.insert(name, values, &[out_c, in_c, k, k], true)
    }

    fn constant(&mut self, name: String, n: usize, value: f32, trainable: bool) -> Result<Var> {
        self.insert(name, vec![value; n], &[n], trainable)
    }

    fn uniform(&mut self, name: String, shape: &[usize], bound: f32) -> Result<Var> {
        let n = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.insert(name, values, shape, true)
    }
}

pub(crate) struct Conv {
    weight: Var,
    stride: usize,
    padding: usize,
}

impl Conv {
    fn new(store: &mut ParamStore, prefix: &str, in_c: usize, out_c: usize, k: usize, stride: usize, padding: usize) -> Result<Self> {
        let weight = store.conv_weight(format!("{prefix}.weight"), out_c, in_c, k)?;
        Ok(Self { weight, stride, padding })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?)
    }

    pub(crate) fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }
}

pub(crate) struct BatchNorm {
    weight: Var,
    bias: Var,
    running_mean: Var,
    running_var: Var,
}

impl BatchNorm {
    fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: store.constant(format!("{prefix}.weight"), channels, 1.0, true)?,
            bias: store.constant(format!("{prefix}.bias"), channels, 0.0, true)?,
            running_mean: store.constant(format!("{prefix}.running_mean"), channels, 0.0, false)?,
            running_var: store.constant(format!("{prefix}.running_var"), channels, 1.0, false)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = self.weight.dims()[0];
        let shape = (1, c, 1, 1);
        let (mean, var) = if train {
            let mean = x.mean_keepdim((0, 2, 3))?;
            let centred = x.broadcast_sub(&mean)?;
            let var = centred.sqr()?.mean_keepdim((0, 2, 3))?;
            let n = x.elem_count() / c;
            let unbiased = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - BN_MOMENTUM))?
                + (mean.detach().flatten_all()? * BN_MOMENTUM)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - BN_MOMENTUM))?
                + (var.detach().flatten_all()? * (BN_MOMENTUM * unbiased))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape(shape)?,
                self.running_var.as_tensor().reshape(shape)?,
            )
        };
        let normed = x.broadcast_sub(&mean)?.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight.as_tensor().reshape(shape)?)?
            .broadcast_add(&self.bias.as_tensor().reshape(shape)?)?)
    }
}

struct DenseLayer {
    norm1: BatchNorm,
    conv1: Conv,
    norm2: BatchNorm,
    conv2: Conv,
}

impl DenseLayer {
    fn new(store: &mut ParamStore, prefix: &str, in_c: usize, growth: usize) -> Result<Self> {
        let bottleneck = BN_SIZE * growth;
        Ok(Self {
            norm1: BatchNorm::new(store, &format!("{prefix}.norm1"), in_c)?,
            conv1: Conv::new(store, &format!("{prefix}.conv1"), in_c, bottleneck, 1, 1, 0)?,
            norm2: BatchNorm::new(store, &format!("{prefix}.norm2"), bottleneck)?,
            conv2: Conv::new(store, &format!("{prefix}.conv2"), bottleneck, growth, 3, 1, 1)?,
        })
    }

    /// Appends `growth` new feature maps to the running state.
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x, train)?.relu()?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h, train)?.relu()?)?;
        Ok(Tensor::cat(&[x, &h], 1)?)
    }
}

struct Transition {
    norm: BatchNorm,
    conv: Conv,
}

impl Transition {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.conv.forward(&self.norm.forward(x, train)?.relu()?)?;
        Ok(h.avg_pool2d(2)?)
    }
}

pub(crate) struct DenseNet {
    conv0: Conv,
    norm0: BatchNorm,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    norm5: BatchNorm,
    classifier_weight: Var,
    classifier_bias: Var,
    feature_dim: usize,
}

impl DenseNet {
    pub(crate) fn new(
        store: &mut ParamStore,
        block_layers: &[usize; 4],
        growth: usize,
        init_features: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let conv0 = Conv::new(store, "features.conv0", 3, init_features, 7, 2, 3)?;
        let norm0 = BatchNorm::new(store, "features.norm0", init_features)?;
        let mut channels = init_features;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (b, &n_layers) in block_layers.iter().enumerate() {
            let mut layers = Vec::with_capacity(n_layers);
            for l in 0..n_layers {
                let prefix = format!("features.denseblock{}.denselayer{}", b + 1, l + 1);
                layers.push(DenseLayer::new(store, &prefix, channels + l * growth, growth)?);
            }
            channels += n_layers * growth;
            blocks.push(layers);
            if b + 1 < block_layers.len() {
                let prefix = format!("features.transition{}", b + 1);
                let out = channels / 2;
                transitions.push(Transition {
                    norm: BatchNorm::new(store, &format!("{prefix}.norm"), channels)?,
                    conv: Conv::new(store, &format!("{prefix}.conv"), channels, out, 1, 1, 0)?,
                });
                channels = out;
            }
        }
        let norm5 = BatchNorm::new(store, "features.norm5", channels)?;
        let bound = 1.0 / (channels as f32).sqrt();
        let classifier_weight = store.uniform("classifier.weight".into(), &[num_classes, channels], bound)?;
        let classifier_bias = store.constant("classifier.bias".into(), num_classes, 0.0, true)?;
        Ok(Self {
            conv0,
            norm0,
            blocks,
            transitions,
            norm5,
            classifier_weight,
            classifier_bias,
            feature_dim: channels,
        })
    }

    pub(crate) fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Conv and linear layers: stem conv, two per dense layer, one per
    /// transition, and the classifier.
    pub(crate) fn weighted_layer_count(&self) -> usize {
        let dense: usize = self.blocks.iter().map(|b| 2 * b.len()).sum();
        1 + dense + self.transitions.len() + 1
    }

    /// Channels entering each dense block, read off the built kernels.
    pub(crate) fn block_input_channels(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b[0].conv1.in_channels()).collect()
    }

    pub(crate) fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.conv0.forward(x)?;
        let h = self.norm0.forward(&h, train)?.relu()?;
        let mut h = stem_max_pool(&h)?;
        for (b, block) in self.blocks.iter().enumerate() {
            for layer in block {
                h = layer.forward(&h, train)?;
            }
            if let Some(t) = self.transitions.get(b) {
                h = t.forward(&h, train)?;
            }
        }
        let h = self.norm5.forward(&h, train)?.relu()?;
        let pooled = h.mean(D::Minus1)?.mean(D::Minus1)?;
        Ok(pooled
            .matmul(&self.classifier_weight.as_tensor().t()?)?
            .broadcast_add(self.classifier_bias.as_tensor())?)
    }
}

/// Spatial size after the stem and the three transitions, or `None` when
/// the input is too small for the network.
/// Every `step`-th element along `dim`, starting at `offset`, `n` of them.
fn strided(x: &Tensor, dim: usize, offset: usize, n: usize, step: usize) -> Result<Tensor> {
    let h = x.narrow(dim, offset, n * step)?;
    let mut dims = h.dims().to_vec();
    dims[dim] = n;
    dims.insert(dim + 1, step);
    Ok(h.reshape(dims)?.narrow(dim + 1, 0, 1)?.squeeze(dim + 1)?)
}

/// 3x3 max-pool, stride 2, padding 1, built from element-wise maxima so it
/// stays differentiable. Zero padding is exact because the input is
/// post-ReLU.
pub(crate) fn stem_max_pool(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let (ho, wo) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
    let x = x.pad_with_zeros(2, 1, 2 * ho + 1 - h)?.pad_with_zeros(3, 1, 2 * wo + 1 - w)?;
    let mut out: Option<Tensor> = None;
    for di in 0..3 {
        let rows = strided(&x, 2, di, ho, 2)?;
        for dj in 0..3 {
            let v = strided(&rows, 3, dj, wo, 2)?;
            out = Some(match out {
                Some(o) => o.maximum(&v)?,
                None => v,
            });
        }
    }
    Ok(out.expect("nine windows"))
}

pub(crate) fn final_spatial(side: usize) -> Option<usize> {
    // conv 7x7 / 2, pad 3
    let s = (side + 6).checked_sub(7)? / 2 + 1;
    // max-pool 3x3 / 2, pad 1
    let mut s = (s + 2).checked_sub(3)? / 2 + 1;
    for _ in 0..3 {
        if s < 2 {
            return None;
        }
        s /= 2;
    }
    Some(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn stem_pool_matches_reference_and_backprops() {
        for (h, w) in [(8, 8), (7, 9), (16, 5)] {
            let data: Vec<f32> = (0..2 * h * w).map(|i| ((i * 37 % 23) as f32).abs()).collect();
            let x = Var::from_vec(data, (1, 2, h, w), &Device::Cpu).unwrap();
            let ours = stem_max_pool(x.as_tensor()).unwrap();
            let reference = x
                .as_tensor()
                .pad_with_zeros(2, 1, 1)
                .unwrap()
                .pad_with_zeros(3, 1, 1)
                .unwrap()
                .max_pool2d_with_stride(3, 2)
                .unwrap();
            assert_eq!(ours.dims(), reference.dims());
            let a: Vec<f32> = ours.flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f32> = reference.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(a, b);
            assert!(ours.sum_all().unwrap().backward().is_ok());
        }
    }
}
