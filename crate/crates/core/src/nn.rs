//! DenseNet-style building blocks: dense layers and blocks, transition
//! pooling, and the three-block feature stream used by both branches.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Mode, Var};
use crate::error::{shape_err, Error, Result};
use crate::ops::BatchNormStats;
use crate::params::{BnId, ParamId, ParamKind, ParamStore, Session};
use crate::tensor::Tensor;

pub const GROWTH_RATE: usize = 12;
pub const STEM_CHANNELS: usize = 16;

/// Backbone size of a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub growth_rate: usize,
    pub layers_per_block: usize,
    /// Nominal network depth: 16, 22 or 40.
    pub depth: u32,
    pub initial_channels: usize,
}

impl BackboneConfig {
    /// Depth 40 has six layers per block, 22 has three and 16 has two.
    pub fn from_depth(depth: u32) -> Result<Self> {
        let layers_per_block = match depth {
            40 => 6,
            22 => 3,
            16 => 2,
            other => return Err(Error::InvalidArgument(format!("unknown backbone depth {other}; expected 16, 22 or 40"))),
        };
        Ok(Self { growth_rate: GROWTH_RATE, layers_per_block, depth, initial_channels: STEM_CHANNELS })
    }

    pub fn block_growth(&self) -> usize {
        self.layers_per_block * self.growth_rate
    }

    /// Channels of the feature map after dense block 2 (the fused width).
    pub fn feature_channels(&self) -> usize {
        self.initial_channels + 2 * self.block_growth()
    }

    /// Channels after a third dense block on top of the fused width.
    pub fn head_channels(&self) -> usize {
        self.feature_channels() + self.block_growth()
    }
}

fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| normal.sample(rng) as f32).collect())
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = [kernel, kernel, in_channels, out_channels];
        let weight = store.add(format!("{name}.weight"), he_normal(&shape, kernel * kernel * in_channels, rng), ParamKind::ConvWeight)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]), ParamKind::Bias)?;
        Ok(Self { weight, bias, stride, padding })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.graph.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BnId,
}

impl BatchNorm {
    pub fn build(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), ParamKind::BnGamma)?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamKind::BnBeta)?;
        let stats = store.add_stats(name, BatchNormStats::new(channels))?;
        Ok(Self { gamma, beta, stats })
    }

    pub fn forward(&self, s: &mut Session, x: Var, mode: Mode) -> Result<Var> {
        s.batch_norm(x, self.gamma, self.beta, self.stats, mode)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn build<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fin: usize, fout: usize, rng: &mut R) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), he_normal(&[fin, fout], fin, rng), ParamKind::LinearWeight)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fout]), ParamKind::Bias)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.graph.fully_connected(x, w, b)
    }
}

/// BN-ReLU-Conv1×1-BN-ReLU-Conv3×3, output concatenated onto the input.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub in_channels: usize,
    growth: usize,
    pub bn1: BatchNorm,
    pub conv1: Conv,
    pub bn2: BatchNorm,
    pub conv2: Conv,
}

impl DenseLayer {
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        growth: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            in_channels,
            growth,
            bn1: BatchNorm::build(store, &format!("{name}.bn1"), in_channels)?,
            conv1: Conv::build(store, &format!("{name}.conv1"), 1, in_channels, growth, 1, 0, rng)?,
            bn2: BatchNorm::build(store, &format!("{name}.bn2"), growth)?,
            conv2: Conv::build(store, &format!("{name}.conv2"), 3, growth, growth, 1, 1, rng)?,
        })
    }

    pub fn growth(&self) -> usize {
        self.growth
    }

    /// Frozen layers always normalize with running statistics and skip dropout.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let channels = *s.graph.value(x).shape().last().unwrap_or(&0);
        if channels != self.in_channels {
            return Err(shape_err("dense_layer", format!("expected {} input channels, got {channels}", self.in_channels)));
        }
        let mode = if s.is_frozen(self.conv1.weight) { Mode::Eval } else { s.mode };
        let h = self.bn1.forward(s, x, mode)?;
        let h = s.graph.relu(h);
        let h = self.conv1.forward(s, h)?;
        let h = self.bn2.forward(s, h, mode)?;
        let h = s.graph.relu(h);
        let h = self.conv2.forward(s, h)?;
        let h = s.dropout(h, mode)?;
        s.graph.concat_channels(x, h)
    }
}

#[derive(Debug, Clone)]
pub struct DenseBlock {
    pub in_channels: usize,
    pub layers: Vec<DenseLayer>,
}

impl DenseBlock {
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        num_layers: usize,
        growth: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..num_layers)
            .map(|k| DenseLayer::build(store, &format!("{name}.layer{k}"), in_channels + k * growth, growth, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { in_channels, layers })
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(self.in_channels, |l| l.in_channels + l.growth())
    }

    pub fn forward(&self, s: &mut Session, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(s, x)?;
        }
        Ok(x)
    }
}

/// 2×2 average pooling between dense blocks; channels are kept.
pub fn transition_pool(s: &mut Session, x: Var) -> Result<Var> {
    s.graph.avg_pool_2x2(x)
}

/// Stem convolution followed by dense blocks 1 and 2 with a transition in
/// between: `(B, 48, 48, 1) -> (B, 24, 24, D)`.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub stem: Conv,
    pub block1: DenseBlock,
    pub block2: DenseBlock,
}

impl FeatureExtractor {
    pub fn forward(&self, s: &mut Session, images: Var) -> Result<Var> {
        let x = self.stem.forward(s, images)?;
        let x = self.block1.forward(s, x)?;
        let x = transition_pool(s, x)?;
        self.block2.forward(s, x)
    }

    pub fn out_channels(&self) -> usize {
        self.block2.out_channels()
    }
}

/// A full single-task stream: extractor, transition, block 3.
#[derive(Debug, Clone)]
pub struct Stream {
    pub extractor: FeatureExtractor,
    pub block3: DenseBlock,
}

pub fn build_extractor<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    config: &BackboneConfig,
    rng: &mut R,
) -> Result<FeatureExtractor> {
    let g = config.growth_rate;
    let l = config.layers_per_block;
    let stem = Conv::build(store, &format!("{prefix}.stem"), 3, 1, config.initial_channels, 1, 1, rng)?;
    let block1 = DenseBlock::build(store, &format!("{prefix}.block1"), config.initial_channels, l, g, rng)?;
    let block2 = DenseBlock::build(store, &format!("{prefix}.block2"), block1.out_channels(), l, g, rng)?;
    Ok(FeatureExtractor { stem, block1, block2 })
}

/// Stem, block 1, pool, block 2, pool, block 3. He-normal weights, zero
/// biases and betas, unit gammas.
pub fn build_stream<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    config: &BackboneConfig,
    rng: &mut R,
) -> Result<Stream> {
    let extractor = build_extractor(store, prefix, config, rng)?;
    let block3 = DenseBlock::build(
        store,
        &format!("{prefix}.block3"),
        extractor.out_channels(),
        config.layers_per_block,
        config.growth_rate,
        rng,
    )?;
    Ok(Stream { extractor, block3 })
}
