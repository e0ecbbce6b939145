//! The four network variants: expression stream alone (`Original`), plus an
//! identity head (`I`), plus a fused identity stream (`F`), or both (`IF`).
//!
//! Every variant feeds its stream features through a 1×1 fusion convolution,
//! a 2×2 pool and the fusion dense block before global pooling and the
//! classification heads. Variants with an identity stream concatenate the two
//! feature maps channel-wise first.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Mode, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{build_extractor, build_stream, transition_pool, BackboneConfig, Conv, DenseBlock, FeatureExtractor, Linear, Stream};
use crate::ops::{BatchNormConfig, BatchNormStats};
use crate::params::{BnId, ParamStore, Session};
use crate::tensor::Tensor;

pub const INPUT_SIZE: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    Original,
    I,
    F,
    IF,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Original, Variant::I, Variant::F, Variant::IF];

    pub fn has_identity_stream(self) -> bool {
        matches!(self, Variant::F | Variant::IF)
    }

    pub fn has_identity_head(self) -> bool {
        matches!(self, Variant::I | Variant::IF)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Original => "original",
            Variant::I => "i",
            Variant::F => "f",
            Variant::IF => "if",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Variant::Original => 0,
            Variant::I => 1,
            Variant::F => 2,
            Variant::IF => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Variant::ALL.get(tag as usize).copied()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "original" => Ok(Variant::Original),
            "i" | "idennet_i" => Ok(Variant::I),
            "f" | "idennet_f" => Ok(Variant::F),
            "if" | "idennet_if" => Ok(Variant::IF),
            other => Err(Error::InvalidArgument(format!("unknown variant {other}; expected original, i, f or if"))),
        }
    }
}

/// Fusion filter `[1, 1, c_in, d]` that maps the first `d` input channels
/// (the expression features) to the outputs with per-channel gain `scale` and
/// gives the rest zero weight.
fn pass_through_filter(c_in: usize, d: usize, scale: &[f32]) -> Tensor<f32> {
    let mut w = vec![0.0; c_in * d];
    for c in 0..d {
        w[c * d + c] = scale.get(c).copied().unwrap_or(1.0);
    }
    Tensor::from_parts(vec![1, 1, c_in, d], w)
}

const EMOTION_NORM: &str = "fusion.norm.emotion";
const IDENTITY_NORM: &str = "fusion.norm.identity";
const FUSION_WEIGHT: &str = "fusion.conv.weight";
const FUSION_BIAS: &str = "fusion.conv.bias";

/// Layer structure of a model; parameter values live in the [`ParamStore`].
#[derive(Debug, Clone)]
struct Architecture {
    emotion: FeatureExtractor,
    identity: Option<FeatureExtractor>,
    /// Fixed standardization of each stream's output ahead of the fusion
    /// convolution: per-channel mean, one variance per stream.
    emotion_norm: BnId,
    identity_norm: Option<BnId>,
    fusion_conv: Conv,
    fusion_block: DenseBlock,
    fc_emo: Linear,
    fc_id: Option<Linear>,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    pub emo_logits: Var,
    pub id_logits: Option<Var>,
    /// Activations after the fusion dense block, `(B, 12, 12, C)`.
    pub fusion_maps: Var,
    /// Expression stream output.
    pub expression_features: Var,
    /// Identity stream output (variants F and IF).
    pub identity_features: Option<Var>,
    /// Input of the fusion convolution: the standardized stream features,
    /// concatenated for F/IF.
    pub fusion_input: Var,
}

/// Outputs of the frozen feature extractors, reusable across steps.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamFeatures {
    pub expression: Tensor<f32>,
    pub identity: Option<Tensor<f32>>,
    /// The maps are already 2×2 average pooled. A 1×1 convolution commutes
    /// with average pooling, so the fusion convolution then runs on the
    /// pooled maps and the pool after it is skipped.
    pub pooled: bool,
}

impl StreamFeatures {
    pub fn batch_size(&self) -> usize {
        self.expression.shape()[0]
    }

    /// Rows `indices` of every feature tensor, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            expression: gather_rows(&self.expression, indices)?,
            identity: self.identity.as_ref().map(|t| gather_rows(t, indices)).transpose()?,
            pooled: self.pooled,
        })
    }

    /// Concatenates along the batch axis.
    pub fn stack(parts: &[StreamFeatures]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("no features to stack".into()))?;
        let cat = |get: &dyn Fn(&StreamFeatures) -> Option<&Tensor<f32>>| -> Result<Option<Tensor<f32>>> {
            let Some(t0) = get(first) else { return Ok(None) };
            let mut shape = t0.shape().to_vec();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let t = get(p).ok_or_else(|| Error::InvalidArgument("mixed feature kinds".into()))?;
                if t.shape()[1..] != shape[1..] || p.pooled != first.pooled {
                    return Err(shape_err("stack_features", format!("{:?} vs {:?}", t.shape(), shape)));
                }
                rows += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            shape[0] = rows;
            Tensor::new(&shape, data).map(Some)
        };
        Ok(Self {
            expression: cat(&|f| Some(&f.expression))?.expect("expression features"),
            identity: cat(&|f| f.identity.as_ref())?,
            pooled: first.pooled,
        })
    }
}

fn gather_rows(t: &Tensor<f32>, indices: &[usize]) -> Result<Tensor<f32>> {
    let b = t.shape()[0];
    let stride = t.len() / b;
    let mut data = Vec::with_capacity(indices.len() * stride);
    for &i in indices {
        if i >= b {
            return Err(shape_err("gather", format!("row {i} out of {b}")));
        }
        data.extend_from_slice(&t.data()[i * stride..(i + 1) * stride]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(&shape, data)
}

#[derive(Debug, Clone)]
pub struct IdenNetModel {
    pub variant: Variant,
    pub backbone: BackboneConfig,
    pub num_expressions: usize,
    pub num_identities: Option<usize>,
    pub store: ParamStore,
    arch: Architecture,
}

pub(crate) fn check_images(images: &Tensor<f32>) -> Result<()> {
    match images.shape() {
        [_, INPUT_SIZE, INPUT_SIZE, 1] => Ok(()),
        other => Err(shape_err("forward", format!("expected images of shape [B, 48, 48, 1], got {other:?}"))),
    }
}

impl IdenNetModel {
    pub fn build<R: Rng + ?Sized>(
        variant: Variant,
        backbone: BackboneConfig,
        num_expressions: usize,
        num_identities: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        if num_expressions < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 expressions, got {num_expressions}")));
        }
        let num_identities = if variant.has_identity_head() {
            match num_identities {
                Some(n) if n >= 2 => Some(n),
                Some(n) => return Err(Error::InvalidArgument(format!("need at least 2 identities, got {n}"))),
                None => return Err(Error::InvalidArgument(format!("variant {variant} needs the number of identities"))),
            }
        } else {
            None
        };
        let mut store = ParamStore::new();
        let emotion = build_extractor(&mut store, "emotion", &backbone, rng)?;
        let identity = variant
            .has_identity_stream()
            .then(|| build_extractor(&mut store, "identity", &backbone, rng))
            .transpose()?;
        let d = backbone.feature_channels();
        let fused_in = if identity.is_some() { 2 * d } else { d };
        let emotion_norm = store.add_stats(EMOTION_NORM, BatchNormStats::new(d))?;
        let identity_norm = identity.is_some().then(|| store.add_stats(IDENTITY_NORM, BatchNormStats::new(d))).transpose()?;
        let fusion_conv = Conv::build(&mut store, "fusion.conv", 1, fused_in, d, 1, 0, rng)?;
        store.set_value(FUSION_WEIGHT, pass_through_filter(fused_in, d, &[]))?;
        let fusion_block = DenseBlock::build(&mut store, "fusion_block", d, backbone.layers_per_block, backbone.growth_rate, rng)?;
        let head_in = fusion_block.out_channels();
        let fc_emo = Linear::build(&mut store, "fc_emo", head_in, num_expressions, rng)?;
        let fc_id = num_identities.map(|n| Linear::build(&mut store, "fc_id", head_in, n, rng)).transpose()?;
        Ok(Self {
            variant,
            backbone,
            num_expressions,
            num_identities,
            store,
            arch: Architecture { emotion, identity, emotion_norm, identity_norm, fusion_conv, fusion_block, fc_emo, fc_id },
        })
    }

    /// Full forward pass from `(B, 48, 48, 1)` images.
    pub fn forward<'a>(
        &'a mut self,
        images: &Tensor<f32>,
        mode: Mode,
        dropout_rate: f64,
        rng: &'a mut ChaCha8Rng,
    ) -> Result<(Session<'a>, ModelOutput)> {
        check_images(images)?;
        let Self { store, arch, .. } = self;
        let mut s = Session::new(store, mode, dropout_rate, rng);
        let x = s.graph.constant(images.clone());
        let xe = arch.emotion.forward(&mut s, x)?;
        let xi = arch.identity.as_ref().map(|st| st.forward(&mut s, x)).transpose()?;
        let out = arch.fuse_and_classify(&mut s, xe, xi, false)?;
        Ok((s, out))
    }

    /// Runs the feature extractors alone. They must be frozen, so the result
    /// is a fixed function of the images and can be cached.
    pub fn extract_features(&mut self, images: &Tensor<f32>, pooled: bool) -> Result<StreamFeatures> {
        check_images(images)?;
        if !self.extractors_frozen() {
            return Err(Error::InvalidArgument("feature extractors must be frozen to extract cached features".into()));
        }
        let Self { store, arch, .. } = self;
        // Frozen layers draw no randomness, so any generator will do.
        let mut rng = rand::SeedableRng::seed_from_u64(0);
        let mut s = Session::new(store, Mode::Eval, 0.0, &mut rng);
        let x = s.graph.constant(images.clone());
        let mut xe = arch.emotion.forward(&mut s, x)?;
        let mut xi = arch.identity.as_ref().map(|st| st.forward(&mut s, x)).transpose()?;
        if pooled {
            xe = s.graph.avg_pool_2x2(xe)?;
            xi = xi.map(|v| s.graph.avg_pool_2x2(v)).transpose()?;
        }
        Ok(StreamFeatures {
            expression: s.graph.value(xe).clone(),
            identity: xi.map(|v| s.graph.value(v).clone()),
            pooled,
        })
    }

    /// Forward pass from cached extractor outputs. Identical to
    /// [`forward`](Self::forward) for unpooled features when the extractors
    /// are frozen; equal up to rounding for pooled ones.
    pub fn forward_features<'a>(
        &'a mut self,
        features: &StreamFeatures,
        mode: Mode,
        dropout_rate: f64,
        rng: &'a mut ChaCha8Rng,
    ) -> Result<(Session<'a>, ModelOutput)> {
        if features.identity.is_some() != self.variant.has_identity_stream() {
            return Err(Error::InvalidArgument(format!("cached features do not match variant {}", self.variant)));
        }
        let Self { store, arch, .. } = self;
        let mut s = Session::new(store, mode, dropout_rate, rng);
        let xe = s.graph.constant(features.expression.clone());
        let xi = features.identity.as_ref().map(|t| s.graph.constant(t.clone()));
        let out = arch.fuse_and_classify(&mut s, xe, xi, features.pooled)?;
        Ok((s, out))
    }

    /// Prefixes of the parameters that make up the feature extraction groups.
    pub fn extractor_prefixes(&self) -> &'static [&'static str] {
        if self.variant.has_identity_stream() {
            &["emotion.", "identity."]
        } else {
            &["emotion."]
        }
    }

    /// Marks both streams' stems and dense blocks 1–2 as non-trainable.
    pub fn freeze_feature_extractors(&mut self) {
        for prefix in self.extractor_prefixes() {
            self.store.freeze_prefix(prefix);
        }
    }

    pub fn extractors_frozen(&self) -> bool {
        let prefixes = self.extractor_prefixes();
        self.store
            .params()
            .iter()
            .filter(|p| prefixes.iter().any(|pre| p.name.starts_with(pre)))
            .all(|p| p.frozen)
    }

    pub fn frozen_set(&self) -> Vec<&str> {
        self.store.frozen_names()
    }

    /// Initializes the extractors from pretrained single-task streams and the
    /// fusion dense block from the expression stream's third block (a one-time
    /// copy; the two are not tied afterwards).
    pub fn load_pretrained_and_share(&mut self, emotion: &ParamStore, identity: Option<&ParamStore>) -> Result<()> {
        if identity.is_some() && !self.variant.has_identity_stream() {
            warn!("variant {} has no identity stream; ignoring the identity checkpoint", self.variant);
        }
        let identity = if self.variant.has_identity_stream() {
            Some(identity.ok_or_else(|| {
                Error::InvalidArgument(format!("variant {} needs an identity checkpoint", self.variant))
            })?)
        } else {
            None
        };
        let source_for = |name: &str| -> Option<(&ParamStore, String)> {
            if let Some(rest) = name.strip_prefix("emotion.") {
                Some((emotion, format!("{STREAM_PREFIX}.{rest}")))
            } else if let Some(rest) = name.strip_prefix("identity.") {
                identity.map(|s| (s, format!("{STREAM_PREFIX}.{rest}")))
            } else {
                name.strip_prefix("fusion_block.").map(|rest| (emotion, format!("{STREAM_PREFIX}.block3.{rest}")))
            }
        };
        let names: Vec<String> = self.store.params().iter().map(|p| p.name.clone()).collect();
        for name in names {
            if let Some((src, key)) = source_for(&name) {
                let p = src.get(&key).ok_or_else(|| Error::Checkpoint(format!("pretrained stream is missing {key}")))?;
                self.store.set_value(&name, p.value.clone())?;
            }
        }
        let stat_names: Vec<String> = self.store.stats().iter().map(|(n, _)| n.clone()).collect();
        for name in stat_names {
            if let Some((src, key)) = source_for(&name) {
                let st = src.get_stats(&key).ok_or_else(|| Error::Checkpoint(format!("pretrained stream is missing {key}")))?;
                self.store.set_stats(&name, st.clone())?;
            }
        }
        self.calibrate_fusion(emotion, identity)
    }

    /// Takes each stream's standardization statistics from the input
    /// statistics of its pretrained block 3 (per-channel means, one shared
    /// variance), then sets the fusion filter so
    /// the standardized expression features are mapped back to their original
    /// values and the identity features start with zero weight. The fused
    /// network thus starts out computing the pretrained expression stream.
    fn calibrate_fusion(&mut self, emotion: &ParamStore, identity: Option<&ParamStore>) -> Result<()> {
        let block3_input = format!("{STREAM_PREFIX}.block3.layer0.bn1");
        // Channels share one scale (the mean variance) so that channels with
        // near-constant pretraining activations are not blown up.
        let stats_of = |src: &ParamStore| {
            let st = src
                .get_stats(&block3_input)
                .ok_or_else(|| Error::Checkpoint(format!("pretrained stream is missing {block3_input}")))?;
            let var = st.var.iter().map(|&v| v as f64).sum::<f64>() / st.var.len().max(1) as f64;
            Ok::<_, Error>(BatchNormStats { mean: st.mean.clone(), var: vec![var as f32; st.var.len()], updates: st.updates })
        };
        let emo = stats_of(emotion)?;
        self.store.set_stats(EMOTION_NORM, emo.clone())?;
        if let Some(id) = identity {
            self.store.set_stats(IDENTITY_NORM, stats_of(id)?)?;
        }
        let d = self.backbone.feature_channels();
        let fused_in = if self.variant.has_identity_stream() { 2 * d } else { d };
        let eps = BatchNormConfig::default().eps;
        let (gain, shift): (Vec<f32>, Vec<f32>) = if emo.is_populated() {
            emo.var.iter().zip(&emo.mean).map(|(&v, &m)| (((v as f64) + eps).sqrt() as f32, m)).unzip()
        } else {
            (vec![1.0; d], vec![0.0; d])
        };
        self.store.set_value(FUSION_WEIGHT, pass_through_filter(fused_in, d, &gain))?;
        self.store.set_value(FUSION_BIAS, Tensor::from_parts(vec![d], shift))?;
        Ok(())
    }
}

impl Architecture {
    fn fuse_and_classify(&self, s: &mut Session, xe: Var, xi: Option<Var>, prepooled: bool) -> Result<ModelOutput> {
        let ze = s.standardize(xe, self.emotion_norm)?;
        let fusion_input = match (xi, self.identity_norm) {
            (Some(xi), Some(norm)) => {
                let zi = s.standardize(xi, norm)?;
                s.graph.concat_channels(ze, zi)?
            }
            (Some(_), None) => return Err(Error::InvalidArgument("identity features without an identity stream".into())),
            (None, _) => ze,
        };
        let fused = self.fusion_conv.forward(s, fusion_input)?;
        let pooled = if prepooled { fused } else { transition_pool(s, fused)? };
        let fusion_maps = self.fusion_block.forward(s, pooled)?;
        let features = s.graph.global_avg_pool(fusion_maps)?;
        let emo_logits = self.fc_emo.forward(s, features)?;
        let id_logits = self.fc_id.as_ref().map(|fc| fc.forward(s, features)).transpose()?;
        Ok(ModelOutput {
            emo_logits,
            id_logits,
            fusion_maps,
            expression_features: xe,
            identity_features: xi,
            fusion_input,
        })
    }
}

/// Parameter-name prefix of a single-task stream network.
pub const STREAM_PREFIX: &str = "stream";

/// Which task a single-task stream is trained for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamTask {
    Emotion,
    Identity,
}

impl StreamTask {
    pub fn as_str(self) -> &'static str {
        match self {
            StreamTask::Emotion => "emotion",
            StreamTask::Identity => "identity",
        }
    }
}

impl FromStr for StreamTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "emotion" | "expression" => Ok(StreamTask::Emotion),
            "identity" => Ok(StreamTask::Identity),
            other => Err(Error::InvalidArgument(format!("unknown stream {other}; expected emotion or identity"))),
        }
    }
}

/// Stem, dense blocks 1–3, global pooling and one classifier: the network
/// each stream is pretrained as.
#[derive(Debug, Clone)]
pub struct StreamNet {
    pub task: StreamTask,
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    pub store: ParamStore,
    stream: Stream,
    fc: Linear,
}

impl StreamNet {
    pub fn build<R: Rng + ?Sized>(task: StreamTask, backbone: BackboneConfig, num_classes: usize, rng: &mut R) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {num_classes}")));
        }
        let mut store = ParamStore::new();
        let stream = build_stream(&mut store, STREAM_PREFIX, &backbone, rng)?;
        let fc = Linear::build(&mut store, "fc", stream.block3.out_channels(), num_classes, rng)?;
        Ok(Self { task, backbone, num_classes, store, stream, fc })
    }

    /// Returns the session and the logits.
    pub fn forward<'a>(
        &'a mut self,
        images: &Tensor<f32>,
        mode: Mode,
        dropout_rate: f64,
        rng: &'a mut ChaCha8Rng,
    ) -> Result<(Session<'a>, Var)> {
        check_images(images)?;
        let Self { store, stream, fc, .. } = self;
        let mut s = Session::new(store, mode, dropout_rate, rng);
        let x = s.graph.constant(images.clone());
        let f = stream.extractor.forward(&mut s, x)?;
        let f = transition_pool(&mut s, f)?;
        let f = stream.block3.forward(&mut s, f)?;
        let f = s.graph.global_avg_pool(f)?;
        let logits = fc.forward(&mut s, f)?;
        Ok((s, logits))
    }
}

/// A 48×48 response map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub size: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.size + x]
    }

    /// 8-bit rendering: 0 for the lowest response, 255 for the highest.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.values.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }
}

/// Channel mean of each fusion map, min-max normalized per image and
/// bilinearly upsampled to the input size. A constant map becomes all 0.5.
///
/// Output pixel `(y, x)` samples the source at `(y, x) · h / 48`, so source
/// pixel `(i, j)` lands exactly on output pixel `(4i, 4j)` for 12×12 maps.
pub fn extract_heatmap(fusion_maps: &Tensor<f32>) -> Result<Vec<Heatmap>> {
    let (b, h, w, c) = fusion_maps.dims4("extract_heatmap")?;
    let mut out = Vec::with_capacity(b);
    for img in fusion_maps.data().chunks_exact(h * w * c) {
        let mean: Vec<f64> = img.chunks_exact(c).map(|px| px.iter().map(|&v| v as f64).sum::<f64>() / c as f64).collect();
        let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
            out.push(Heatmap { size: INPUT_SIZE, values: vec![0.5; INPUT_SIZE * INPUT_SIZE] });
            continue;
        }
        let norm: Vec<f64> = mean.iter().map(|&v| (v - lo) / (hi - lo)).collect();
        let sample = |sy: f64, sx: f64| -> f64 {
            let y0 = (sy.floor() as usize).min(h - 1);
            let x0 = (sx.floor() as usize).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fy = (sy - y0 as f64).clamp(0.0, 1.0);
            let fx = (sx - x0 as f64).clamp(0.0, 1.0);
            let top = norm[y0 * w + x0] * (1.0 - fx) + norm[y0 * w + x1] * fx;
            let bottom = norm[y1 * w + x0] * (1.0 - fx) + norm[y1 * w + x1] * fx;
            top * (1.0 - fy) + bottom * fy
        };
        let mut values = Vec::with_capacity(INPUT_SIZE * INPUT_SIZE);
        for y in 0..INPUT_SIZE {
            for x in 0..INPUT_SIZE {
                let v = sample(y as f64 * h as f64 / INPUT_SIZE as f64, x as f64 * w as f64 / INPUT_SIZE as f64);
                values.push(v.clamp(0.0, 1.0));
            }
        }
        out.push(Heatmap { size: INPUT_SIZE, values });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn depth(d: u32) -> BackboneConfig {
        BackboneConfig::from_depth(d).unwrap()
    }

    fn conv_count(k: usize, cin: usize, cout: usize) -> usize {
        k * k * cin * cout + cout
    }

    fn block_count(cin: usize, layers: usize, g: usize) -> usize {
        (0..layers)
            .map(|k| {
                let c = cin + k * g;
                2 * c + conv_count(1, c, g) + 2 * g + conv_count(3, g, g)
            })
            .sum()
    }

    fn expected_count(variant: Variant, b: &BackboneConfig, e: usize, n: usize) -> usize {
        let (g, l, c0) = (b.growth_rate, b.layers_per_block, b.initial_channels);
        let d = b.feature_channels();
        let extractor = conv_count(3, 1, c0) + block_count(c0, l, g) + block_count(c0 + l * g, l, g);
        let streams = if variant.has_identity_stream() { 2 } else { 1 };
        let head_in = d + l * g;
        streams * extractor
            + conv_count(1, streams * d, d)
            + block_count(d, l, g)
            + (head_in * e + e)
            + if variant.has_identity_head() { head_in * n + n } else { 0 }
    }

    #[test]
    fn parameter_counts_follow_closed_form() {
        for d in [16, 22, 40] {
            let b = depth(d);
            for v in Variant::ALL {
                let m = IdenNetModel::build(v, b, 6, Some(80), &mut rng(1)).unwrap();
                assert_eq!(m.store.numel(), expected_count(v, &b, 6, 80), "{v} depth {d}");
            }
            let orig = IdenNetModel::build(Variant::Original, b, 6, None, &mut rng(1)).unwrap().store.numel();
            let f = IdenNetModel::build(Variant::F, b, 6, None, &mut rng(1)).unwrap().store.numel();
            let dch = b.feature_channels();
            let extractor = orig - conv_count(1, dch, dch) - block_count(dch, b.layers_per_block, 12) - (b.head_channels() * 6 + 6);
            assert_eq!(f, orig + extractor + dch * dch);
        }
    }

    #[test]
    fn head_shapes_and_variant_contents() {
        let m = IdenNetModel::build(Variant::IF, depth(40), 6, Some(80), &mut rng(2)).unwrap();
        assert_eq!(m.store.get("fc_emo.weight").unwrap().value.shape(), &[232, 6]);
        assert_eq!(m.store.get("fc_id.weight").unwrap().value.shape(), &[232, 80]);
        assert_eq!(m.store.get("fusion.conv.weight").unwrap().value.shape(), &[1, 1, 320, 160]);
        assert_eq!(m.store.get("fusion.conv.bias").unwrap().value.shape(), &[160]);

        let o = IdenNetModel::build(Variant::Original, depth(16), 6, None, &mut rng(2)).unwrap();
        assert!(o.store.params().iter().all(|p| !p.name.starts_with("identity.") && !p.name.starts_with("fc_id")));
        assert_eq!(o.store.get("fusion.conv.weight").unwrap().value.shape(), &[1, 1, 64, 64]);

        let f = IdenNetModel::build(Variant::F, depth(16), 6, None, &mut rng(2)).unwrap();
        let fi = IdenNetModel::build(Variant::IF, depth(16), 6, Some(8), &mut rng(2)).unwrap();
        let names_f: Vec<&str> = f.store.params().iter().map(|p| p.name.as_str()).collect();
        let names_if: Vec<&str> = fi.store.params().iter().map(|p| p.name.as_str()).filter(|n| !n.starts_with("fc_id.")).collect();
        assert_eq!(names_f, names_if);
    }

    #[test]
    fn build_validates_class_counts() {
        assert!(IdenNetModel::build(Variant::I, depth(16), 6, None, &mut rng(0)).is_err());
        assert!(IdenNetModel::build(Variant::IF, depth(16), 6, None, &mut rng(0)).is_err());
        assert!(IdenNetModel::build(Variant::Original, depth(16), 1, None, &mut rng(0)).is_err());
        assert!(IdenNetModel::build(Variant::F, depth(16), 6, None, &mut rng(0)).is_ok());
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let mut m = IdenNetModel::build(Variant::Original, depth(16), 6, None, &mut rng(0)).unwrap();
        let mut r = rng(1);
        assert!(m.forward(&Tensor::zeros(&[1, 60, 60, 1]), Mode::Train, 0.0, &mut r).is_err());
        assert!(m.forward(&Tensor::zeros(&[1, 48, 48, 3]), Mode::Train, 0.0, &mut r).is_err());
    }

    #[test]
    fn freezing_covers_extractors_only() {
        let mut o = IdenNetModel::build(Variant::Original, depth(16), 6, None, &mut rng(0)).unwrap();
        o.freeze_feature_extractors();
        let frozen = o.frozen_set();
        assert!(!frozen.is_empty());
        assert!(frozen.iter().all(|n| n.starts_with("emotion.stem") || n.starts_with("emotion.block1") || n.starts_with("emotion.block2")));
        let all_emotion = o.store.params().iter().filter(|p| p.name.starts_with("emotion.")).count();
        assert_eq!(frozen.len(), all_emotion);

        let mut f = IdenNetModel::build(Variant::IF, depth(16), 6, Some(8), &mut rng(0)).unwrap();
        f.freeze_feature_extractors();
        assert!(f.frozen_set().iter().any(|n| n.starts_with("identity.")));
        assert!(f.frozen_set().iter().all(|n| n.starts_with("identity.") || n.starts_with("emotion.")));
    }

    #[test]
    fn sharing_copies_block3_and_streams() {
        let b = depth(16);
        let emo = StreamNet::build(StreamTask::Emotion, b, 6, &mut rng(10)).unwrap();
        let id = StreamNet::build(StreamTask::Identity, b, 8, &mut rng(11)).unwrap();
        let mut m = IdenNetModel::build(Variant::IF, b, 6, Some(8), &mut rng(12)).unwrap();
        m.load_pretrained_and_share(&emo.store, Some(&id.store)).unwrap();
        for p in m.store.params() {
            let src = if let Some(rest) = p.name.strip_prefix("fusion_block.") {
                Some(&emo.store.get(&format!("stream.block3.{rest}")).unwrap().value)
            } else if let Some(rest) = p.name.strip_prefix("emotion.") {
                Some(&emo.store.get(&format!("stream.{rest}")).unwrap().value)
            } else if let Some(rest) = p.name.strip_prefix("identity.") {
                Some(&id.store.get(&format!("stream.{rest}")).unwrap().value)
            } else {
                None
            };
            if let Some(src) = src {
                assert_eq!(&p.value, src, "{}", p.name);
            }
        }
    }

    fn trained_stream(task: StreamTask, k: usize, seed: u64) -> StreamNet {
        let mut r = rng(seed);
        let mut net = StreamNet::build(task, depth(16), k, &mut r).unwrap();
        let x = Tensor::from_parts(vec![4, 48, 48, 1], (0..4 * 48 * 48).map(|_| r.random_range(0.0..1.0)).collect());
        drop(net.forward(&x, Mode::Train, 0.0, &mut r).unwrap());
        net
    }

    #[test]
    fn fused_model_starts_as_the_expression_stream() {
        let mut emo = trained_stream(StreamTask::Emotion, 6, 30);
        let id = trained_stream(StreamTask::Identity, 8, 31);
        let x = Tensor::from_parts(vec![3, 48, 48, 1], (0..3 * 48 * 48).map(|i| ((i * 37) % 101) as f32 / 101.0).collect());
        let want = {
            let mut r = rng(0);
            let (s, logits) = emo.forward(&x, Mode::Eval, 0.0, &mut r).unwrap();
            s.graph.value(logits).clone()
        };
        for variant in Variant::ALL {
            let n = variant.has_identity_head().then_some(8);
            let mut m = IdenNetModel::build(variant, depth(16), 6, n, &mut rng(32)).unwrap();
            m.load_pretrained_and_share(&emo.store, variant.has_identity_stream().then_some(&id.store)).unwrap();
            m.store.set_value("fc_emo.weight", emo.store.get("fc.weight").unwrap().value.clone()).unwrap();
            m.store.set_value("fc_emo.bias", emo.store.get("fc.bias").unwrap().value.clone()).unwrap();
            let mut r = rng(0);
            let (s, out) = m.forward(&x, Mode::Eval, 0.0, &mut r).unwrap();
            let diff = s.graph.value(out.emo_logits).max_abs_diff(&want);
            assert!(diff < 1e-4, "{variant}: {diff}");
        }
    }

    #[test]
    fn sharing_rejects_mismatched_depth_and_missing_identity() {
        let emo16 = StreamNet::build(StreamTask::Emotion, depth(16), 6, &mut rng(1)).unwrap();
        let mut m40 = IdenNetModel::build(Variant::Original, depth(40), 6, None, &mut rng(2)).unwrap();
        assert!(m40.load_pretrained_and_share(&emo16.store, None).is_err());
        let mut f = IdenNetModel::build(Variant::F, depth(16), 6, None, &mut rng(2)).unwrap();
        assert!(f.load_pretrained_and_share(&emo16.store, None).is_err());
        let mut o = IdenNetModel::build(Variant::Original, depth(16), 6, None, &mut rng(2)).unwrap();
        o.load_pretrained_and_share(&emo16.store, Some(&emo16.store)).unwrap();
    }

    #[test]
    fn cached_features_match_full_forward() {
        let b = depth(16);
        let mut m = IdenNetModel::build(Variant::IF, b, 6, Some(8), &mut rng(3)).unwrap();
        let images = Tensor::from_parts(vec![2, 48, 48, 1], (0..2 * 48 * 48).map(|i| ((i * 31 % 97) as f32) / 97.0).collect());
        // populate running statistics once
        {
            let mut r = rng(4);
            m.forward(&images, Mode::Train, 0.0, &mut r).unwrap();
        }
        assert!(m.extract_features(&images, false).is_err());
        m.freeze_feature_extractors();
        let feats = m.extract_features(&images, false).unwrap();
        let mut r1 = rng(5);
        let full = {
            let (s, out) = m.forward(&images, Mode::Eval, 0.0, &mut r1).unwrap();
            s.graph.value(out.emo_logits).clone()
        };
        let mut r2 = rng(5);
        {
            let (s, out) = m.forward_features(&feats, Mode::Eval, 0.0, &mut r2).unwrap();
            assert_eq!(s.graph.value(out.emo_logits), &full);
        }

        let pooled = m.extract_features(&images, true).unwrap();
        assert_eq!(pooled.expression.shape(), &[2, 12, 12, 64]);
        let mut r3 = rng(5);
        let (s, out) = m.forward_features(&pooled, Mode::Eval, 0.0, &mut r3).unwrap();
        assert!(s.graph.value(out.emo_logits).max_abs_diff(&full) < 1e-4);
    }

    #[test]
    fn feature_gather_and_stack() {
        let t = Tensor::from_parts(vec![3, 1, 1, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let f = StreamFeatures { expression: t.clone(), identity: Some(t), pooled: true };
        let g = f.gather(&[2, 0]).unwrap();
        assert_eq!(g.expression.data(), &[4.0, 5.0, 0.0, 1.0]);
        let s = StreamFeatures::stack(&[g.clone(), f.gather(&[1]).unwrap()]).unwrap();
        assert_eq!(s.batch_size(), 3);
        assert_eq!(s.identity.unwrap().data(), &[4.0, 5.0, 0.0, 1.0, 2.0, 3.0]);
        assert!(f.gather(&[3]).is_err());
    }

    #[test]
    fn heatmap_degenerate_range_and_hot_pixel() {
        let flat = Tensor::full(&[1, 12, 12, 5], 3.0f32);
        let h = extract_heatmap(&flat).unwrap();
        assert!(h[0].values.iter().all(|&v| v == 0.5));

        let mut d = vec![0.0f32; 12 * 12 * 2];
        d[(5 * 12 + 7) * 2] = 4.0;
        d[(5 * 12 + 7) * 2 + 1] = 2.0;
        let h = extract_heatmap(&Tensor::from_parts(vec![1, 12, 12, 2], d)).unwrap();
        let (mut best, mut at) = (f64::MIN, (0, 0));
        for y in 0..48 {
            for x in 0..48 {
                if h[0].at(y, x) > best {
                    best = h[0].at(y, x);
                    at = (y, x);
                }
            }
        }
        assert_eq!(best, 1.0);
        assert_eq!(at, (20, 28));
        assert!(h[0].values.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn variant_parsing() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
            assert_eq!(Variant::from_tag(v.tag()), Some(v));
        }
        assert!("x".parse::<Variant>().is_err());
    }
}
