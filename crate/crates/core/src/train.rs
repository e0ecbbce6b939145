//! Pretraining, fine-tuning and evaluation loops.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Mode;
use crate::checkpoint::{Checkpoint, ModelKind};
use crate::data::{augment, class_counts, crop, images_to_tensor, CropMode, FoldSplit, Sample};
use crate::error::{Error, Result};
use crate::eval::{center_crops, EvalReport};
use crate::loss::{JointLossValue, LossConfig};
use crate::model::{IdenNetModel, StreamFeatures, StreamNet, StreamTask, Variant};
use crate::nn::BackboneConfig;
use crate::optim::{Sgd, Stage, TrainConfig};
use crate::ops::{BatchNormConfig, BatchNormStats};
use crate::params::{BnId, ParamStore};
use crate::tensor::Tensor;

/// Batch size used for inference and feature extraction.
const EVAL_BATCH: usize = 64;

/// How training images are cropped to 48×48.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropPolicy {
    Random,
    Center,
}

impl fmt::Display for CropPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CropPolicy::Random => "random",
            CropPolicy::Center => "center",
        })
    }
}

impl FromStr for CropPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(CropPolicy::Random),
            "center" => Ok(CropPolicy::Center),
            other => Err(Error::Config(format!("unknown crop policy {other}; expected random or center"))),
        }
    }
}

/// Index of the largest entry of each row; the first wins ties.
pub fn argmax_rows(t: &Tensor<f32>) -> Result<Vec<usize>> {
    let (_, k) = t.dims2("argmax")?;
    Ok(t.data()
        .chunks_exact(k)
        .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: JointLossValue,
}

/// One line of the per-epoch training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub stage: Stage,
    pub fold: Option<usize>,
    pub epoch: usize,
    pub lr: f64,
    /// Means over the epoch's steps.
    pub loss: JointLossValue,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage={}", self.stage)?;
        if let Some(k) = self.fold {
            write!(f, " fold={k}")?;
        }
        write!(
            f,
            " epoch={} lr={} l_emo={:.6} l_id={:.6} total={:.6} train_acc={:.4}",
            self.epoch, self.lr, self.loss.l_emo, self.loss.l_id, self.loss.total, self.train_acc
        )?;
        if let Some(v) = self.val_acc {
            write!(f, " val_acc={v:.4}")?;
        }
        Ok(())
    }
}

/// Network input for one batch: images, or cached extractor outputs.
#[derive(Debug, Clone)]
pub enum BatchInput {
    Images(Tensor<f32>),
    Features(StreamFeatures),
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub loss: JointLossValue,
    pub grads: Vec<Option<Tensor<f32>>>,
    pub predictions: Vec<usize>,
}

/// A network the training loop can drive.
pub trait Trainable {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// Forward and backward pass on one batch. `targets` are the primary
    /// labels, `aux` the identity labels used by an identity head.
    fn train_step(
        &mut self,
        input: &BatchInput,
        targets: &[usize],
        aux: &[usize],
        loss: &LossConfig,
        dropout_rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepResult>;
    /// Eval-mode predictions of the primary head.
    fn predict(&mut self, input: &BatchInput) -> Result<Vec<usize>>;
    /// Training-mode forward pass without dropout or backward pass; only
    /// the running statistics of trainable batch-norm layers change.
    fn forward_statistics(&mut self, input: &BatchInput) -> Result<()>;
}

fn images_only(input: &BatchInput) -> Result<&Tensor<f32>> {
    match input {
        BatchInput::Images(t) => Ok(t),
        BatchInput::Features(_) => Err(Error::InvalidArgument("a single-stream network needs images".into())),
    }
}

impl Trainable for StreamNet {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn train_step(
        &mut self,
        input: &BatchInput,
        targets: &[usize],
        _aux: &[usize],
        _loss: &LossConfig,
        dropout_rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepResult> {
        let (mut s, logits) = self.forward(images_only(input)?, Mode::Train, dropout_rate, rng)?;
        let l = s.graph.softmax_cross_entropy(logits, targets)?;
        s.graph.backward(l)?;
        Ok(StepResult {
            loss: JointLossValue::new(s.graph.value(l).item() as f64, 0.0),
            grads: s.param_grads(),
            predictions: argmax_rows(s.graph.value(logits))?,
        })
    }

    fn predict(&mut self, input: &BatchInput) -> Result<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (s, logits) = self.forward(images_only(input)?, Mode::Eval, 0.0, &mut rng)?;
        argmax_rows(s.graph.value(logits))
    }

    fn forward_statistics(&mut self, input: &BatchInput) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.forward(images_only(input)?, Mode::Train, 0.0, &mut rng)?;
        Ok(())
    }
}

impl Trainable for IdenNetModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn train_step(
        &mut self,
        input: &BatchInput,
        targets: &[usize],
        aux: &[usize],
        loss: &LossConfig,
        dropout_rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepResult> {
        let (mut s, out) = match input {
            BatchInput::Images(t) => self.forward(t, Mode::Train, dropout_rate, rng)?,
            BatchInput::Features(f) => self.forward_features(f, Mode::Train, dropout_rate, rng)?,
        };
        let l_emo = s.graph.softmax_cross_entropy(out.emo_logits, targets)?;
        let (total, l_id) = match out.id_logits {
            Some(id) => {
                let l_id = s.graph.softmax_focal(id, aux, loss.alpha, loss.gamma)?;
                (s.graph.add(l_emo, l_id)?, Some(l_id))
            }
            None => (l_emo, None),
        };
        s.graph.backward(total)?;
        let value = JointLossValue::new(
            s.graph.value(l_emo).item() as f64,
            l_id.map_or(0.0, |v| s.graph.value(v).item() as f64),
        );
        Ok(StepResult { loss: value, grads: s.param_grads(), predictions: argmax_rows(s.graph.value(out.emo_logits))? })
    }

    fn predict(&mut self, input: &BatchInput) -> Result<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (s, out) = match input {
            BatchInput::Images(t) => self.forward(t, Mode::Eval, 0.0, &mut rng)?,
            BatchInput::Features(f) => self.forward_features(f, Mode::Eval, 0.0, &mut rng)?,
        };
        argmax_rows(s.graph.value(out.emo_logits))
    }

    fn forward_statistics(&mut self, input: &BatchInput) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match input {
            BatchInput::Images(t) => self.forward(t, Mode::Train, 0.0, &mut rng)?,
            BatchInput::Features(f) => self.forward_features(f, Mode::Train, 0.0, &mut rng)?,
        };
        Ok(())
    }
}

/// Training examples: 60×60 samples, or cached features standing in for
/// their center crops.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub samples: Vec<Sample>,
    pub features: Option<StreamFeatures>,
}

impl TrainData {
    pub fn from_samples(samples: Vec<Sample>) -> Self {
        Self { samples, features: None }
    }

    pub fn len(&self) -> usize {
        self.features.as_ref().map_or(self.samples.len(), |f| f.batch_size())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, indices: &[usize], policy: CropPolicy, rng: &mut ChaCha8Rng) -> Result<BatchInput> {
        if let Some(f) = &self.features {
            if policy != CropPolicy::Center {
                return Err(Error::InvalidArgument("cached features only support center crops".into()));
            }
            return Ok(BatchInput::Features(f.gather(indices)?));
        }
        let mode = match policy {
            CropPolicy::Random => CropMode::Train,
            CropPolicy::Center => CropMode::Eval,
        };
        let crops: Vec<_> = indices.iter().map(|&i| crop(&self.samples[i].image, mode, rng)).collect();
        Ok(BatchInput::Images(images_to_tensor(crops.iter())?))
    }
}

/// Predicted classes for all of `data`, center-cropped, in eval mode.
pub fn predict_all<N: Trainable>(net: &mut N, data: &TrainData) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        out.extend(net.predict(&data.batch(chunk, CropPolicy::Center, &mut rng)?)?);
    }
    Ok(out)
}

/// Expression accuracy report for `samples` (center crop, eval mode).
pub fn evaluate<N: Trainable>(net: &mut N, samples: &[Sample], num_classes: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty set".into()));
    }
    let data = TrainData::from_samples(samples.to_vec());
    let preds = predict_all(net, &data)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.expression).collect();
    EvalReport::from_predictions(&labels, &preds, num_classes)
}

/// Network, optimizer state and generator of one training run.
#[derive(Debug, Clone)]
pub struct Trainer<N> {
    pub net: N,
    pub sgd: Sgd,
    pub rng: ChaCha8Rng,
    /// Epochs completed so far.
    pub epoch: usize,
    pub config: TrainConfig,
    pub loss: LossConfig,
    pub crop: CropPolicy,
}

impl<N: Trainable> Trainer<N> {
    pub fn new(net: N, config: TrainConfig, loss: LossConfig, crop: CropPolicy, rng: ChaCha8Rng) -> Self {
        Self { net, sgd: Sgd::from_config(&config), rng, epoch: 0, config, loss, crop }
    }

    /// One pass over `data` in a shuffled order. Batches of a single sample
    /// are skipped since batch statistics need two.
    pub fn run_epoch(
        &mut self,
        data: &TrainData,
        targets: &[usize],
        aux: &[usize],
        mut on_step: impl FnMut(&StepLog),
    ) -> Result<(JointLossValue, f64)> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let lr = self.config.lr_at(self.epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut emo, mut id, mut steps, mut correct, mut seen) = (0.0, 0.0, 0usize, 0usize, 0usize);
        for (step, idx) in order.chunks(self.config.batch_size).filter(|c| c.len() >= 2).enumerate() {
            let input = data.batch(idx, self.crop, &mut self.rng)?;
            let t: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
            let a: Vec<usize> = if aux.is_empty() { Vec::new() } else { idx.iter().map(|&i| aux[i]).collect() };
            let r = self.net.train_step(&input, &t, &a, &self.loss, self.config.dropout_rate, &mut self.rng)?;
            self.sgd.step(self.net.store_mut(), &r.grads, lr)?;
            correct += r.predictions.iter().zip(&t).filter(|(p, t)| p == t).count();
            seen += t.len();
            emo += r.loss.l_emo;
            id += r.loss.l_id;
            steps += 1;
            on_step(&StepLog { epoch: self.epoch, step, lr, loss: r.loss });
        }
        if steps == 0 {
            return Err(Error::InvalidArgument("training set too small for a batch of two".into()));
        }
        self.epoch += 1;
        Ok((JointLossValue::new(emo / steps as f64, id / steps as f64), correct as f64 / seen as f64))
    }

    /// Replaces the running statistics of every batch-norm layer that
    /// training updates by the average dropout-free batch statistics over
    /// center crops of `data` (an evenly strided subset of at most
    /// [`RECALIBRATION_SAMPLES`]). Dropout in front of batch norm inflates
    /// the variance seen during training, so statistics collected with it
    /// active do not match inference. Parameters, optimizer state and the
    /// trainer's generator are untouched.
    pub fn recalibrate_batch_norm(&mut self, data: &TrainData) -> Result<()> {
        let n = data.len();
        let stride = n.div_ceil(RECALIBRATION_SAMPLES).max(1);
        let picked: Vec<usize> = (0..n).step_by(stride).collect();
        let keep = BatchNormConfig::default().momentum;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut sums: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; self.net.store().stats().len()];
        let mut batches = 0usize;
        for idx in picked.chunks(self.config.batch_size).filter(|c| c.len() >= 2) {
            let input = data.batch(idx, CropPolicy::Center, &mut rng)?;
            let before: Vec<BatchNormStats<f32>> = self.net.store().stats().iter().map(|(_, st)| st.clone()).collect();
            self.net.forward_statistics(&input)?;
            for ((slot, (_, new)), old) in sums.iter_mut().zip(self.net.store().stats()).zip(&before) {
                if new.updates == old.updates {
                    continue;
                }
                // undo the momentum update to recover this batch's statistics
                let (m, v) = slot.get_or_insert_with(|| (vec![0.0; new.channels()], vec![0.0; new.channels()]));
                for c in 0..new.channels() {
                    m[c] += (new.mean[c] as f64 - keep * old.mean[c] as f64) / (1.0 - keep);
                    v[c] += (new.var[c] as f64 - keep * old.var[c] as f64) / (1.0 - keep);
                }
            }
            batches += 1;
        }
        let store = self.net.store_mut();
        for (i, slot) in sums.into_iter().enumerate() {
            if let Some((m, v)) = slot {
                let st = store.stats_mut(BnId(i));
                st.mean = m.iter().map(|x| (x / batches as f64) as f32).collect();
                st.var = v.iter().map(|x| (x / batches as f64).max(0.0) as f32).collect();
            }
        }
        Ok(())
    }
}

/// Cap on the samples used by [`Trainer::recalibrate_batch_norm`].
pub const RECALIBRATION_SAMPLES: usize = 2048;

impl Trainer<IdenNetModel> {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.net, self.epoch as u64, &self.rng, Some(self.sgd.velocity()))
    }

    /// Continues a run from a checkpoint written by [`checkpoint`](Self::checkpoint).
    pub fn resume(ckpt: &Checkpoint, config: TrainConfig, loss: LossConfig, crop: CropPolicy) -> Result<Self> {
        let mut t = Self::new(ckpt.to_model()?, config, loss, crop, ckpt.rng.restore());
        t.epoch = ckpt.epoch as usize;
        if let Some(v) = &ckpt.velocity {
            t.sgd.set_velocity(v.clone());
        }
        Ok(t)
    }
}

fn task_labels(samples: &[Sample], task: StreamTask) -> Vec<usize> {
    samples
        .iter()
        .map(|s| match task {
            StreamTask::Emotion => s.expression,
            StreamTask::Identity => s.identity,
        })
        .collect()
}

fn check_range(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= num_classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, num_classes }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOptions {
    pub train: TrainConfig,
    pub seed: u64,
    pub augment: bool,
    pub crop: CropPolicy,
    pub validation_fraction: f64,
    /// Head size; defaults to the largest label plus one.
    pub num_classes: Option<usize>,
    /// Where per-epoch and best checkpoints go, if anywhere.
    pub out_dir: Option<PathBuf>,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            train: TrainConfig::pretrain(),
            seed: 0,
            augment: true,
            crop: CropPolicy::Random,
            validation_fraction: 0.1,
            num_classes: None,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Weights of the epoch with the best validation accuracy (the last
    /// epoch when nothing is held out).
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub best_val_accuracy: Option<f64>,
    pub logs: Vec<EpochLog>,
}

/// Trains a single-task stream (stem, blocks 1–3, pooling, classifier).
pub fn pretrain(
    task: StreamTask,
    samples: &[Sample],
    backbone: BackboneConfig,
    opts: &PretrainOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<PretrainOutcome> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty pretraining set".into()));
    }
    opts.train.validate()?;
    let labels = task_labels(samples, task);
    let k = opts.num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    check_range(&labels, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((opts.validation_fraction * samples.len() as f64).round() as usize).min(samples.len().saturating_sub(2));
    let (val_idx, train_idx) = order.split_at(n_val);
    let val: Vec<Sample> = val_idx.iter().map(|&i| samples[i].clone()).collect();
    let mut train: Vec<Sample> = train_idx.iter().map(|&i| samples[i].clone()).collect();
    if opts.augment {
        train = augment(&train);
    }
    let train_labels = task_labels(&train, task);
    let val_labels = task_labels(&val, task);
    let data = TrainData::from_samples(train);
    let val_data = TrainData::from_samples(val);

    let net = StreamNet::build(task, backbone, k, &mut rng)?;
    let mut trainer = Trainer::new(net, opts.train.clone(), LossConfig::default(), opts.crop, rng);
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut logs = Vec::new();
    let mut best: Option<(usize, Option<f64>, Checkpoint)> = None;
    for epoch in 0..opts.train.epochs {
        let lr = trainer.config.lr_at(epoch);
        let (loss, train_acc) = trainer.run_epoch(&data, &train_labels, &[], |_| {})?;
        trainer.recalibrate_batch_norm(&data)?;
        let val_acc = if val_data.is_empty() {
            None
        } else {
            let preds = predict_all(&mut trainer.net, &val_data)?;
            Some(preds.iter().zip(&val_labels).filter(|(p, t)| p == t).count() as f64 / val_labels.len() as f64)
        };
        let log = EpochLog { stage: Stage::Pretrain, fold: None, epoch, lr, loss, train_acc, val_acc };
        info!("{log}");
        on_epoch(&log);
        logs.push(log);
        let ckpt = Checkpoint::from_stream(&trainer.net, trainer.epoch as u64, &trainer.rng, Some(trainer.sgd.velocity()));
        if let Some(dir) = &opts.out_dir {
            ckpt.save(&dir.join(format!("{}_epoch_{epoch:03}.ckpt", task.as_str())))?;
        }
        let improved = match (&best, val_acc) {
            (None, _) => true,
            (Some((_, Some(b), _)), Some(v)) => v > *b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            best = Some((epoch, val_acc, ckpt));
        }
    }
    let (best_epoch, best_val_accuracy, best) = best.expect("at least one epoch");
    if let Some(dir) = &opts.out_dir {
        best.save(&dir.join(format!("{}_best.ckpt", task.as_str())))?;
    }
    Ok(PretrainOutcome { best, best_epoch, best_val_accuracy, logs })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOptions {
    pub train: TrainConfig,
    /// Identity-loss `alpha` and `gamma`; class counts come from the data.
    pub loss: LossConfig,
    pub seed: u64,
    pub augment: bool,
    pub crop: CropPolicy,
    /// Train on cached, pre-pooled extractor outputs of the center crops.
    pub cache_features: bool,
    /// Where the per-fold checkpoints go, if anywhere.
    pub out_dir: Option<PathBuf>,
    /// Keep every step's loss values in the fold outcome.
    pub record_steps: bool,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self {
            train: TrainConfig::finetune(),
            loss: LossConfig::default(),
            seed: 0,
            augment: true,
            crop: CropPolicy::Random,
            cache_features: false,
            out_dir: None,
            record_steps: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub report: EvalReport,
    pub logs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
    pub model: IdenNetModel,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub folds: Vec<FoldOutcome>,
    /// Pooled over folds, with per-fold accuracies and their mean.
    pub report: EvalReport,
}

/// Pretrained streams for fine-tuning, checked against each other.
#[derive(Debug, Clone, Copy)]
pub struct Pretrained<'a> {
    pub emotion: &'a Checkpoint,
    pub identity: Option<&'a Checkpoint>,
}

impl<'a> Pretrained<'a> {
    pub fn new(emotion: &'a Checkpoint, identity: Option<&'a Checkpoint>) -> Result<Self> {
        let task_of = |c: &Checkpoint| match c.kind {
            ModelKind::Stream { task, .. } => Ok(task),
            ModelKind::IdenNet { .. } => Err(Error::Checkpoint("expected a pretrained stream checkpoint".into())),
        };
        if task_of(emotion)? != StreamTask::Emotion {
            return Err(Error::Checkpoint("the emotion checkpoint holds an identity stream".into()));
        }
        if let Some(id) = identity {
            if task_of(id)? != StreamTask::Identity {
                return Err(Error::Checkpoint("the identity checkpoint holds an emotion stream".into()));
            }
            if id.backbone != emotion.backbone {
                return Err(Error::Checkpoint(format!(
                    "stream depths differ: {} vs {}",
                    emotion.backbone.depth, id.backbone.depth
                )));
            }
        }
        Ok(Self { emotion, identity })
    }

    pub fn backbone(&self) -> BackboneConfig {
        self.emotion.backbone
    }

    /// The identity checkpoint if `variant` uses one; warns when it is supplied
    /// but unused, errors when it is needed but missing.
    fn identity_for(&self, variant: Variant) -> Result<Option<&'a Checkpoint>> {
        match (variant.has_identity_stream(), self.identity) {
            (true, Some(id)) => Ok(Some(id)),
            (true, None) => Err(Error::InvalidArgument(format!("variant {variant} needs an identity checkpoint"))),
            (false, Some(_)) => {
                warn!("variant {variant} has no identity stream; ignoring the identity checkpoint");
                Ok(None)
            }
            (false, None) => Ok(None),
        }
    }

    /// Builds `variant`, loads the streams, shares block 3 and freezes the
    /// extractors.
    pub fn build(&self, variant: Variant, num_expressions: usize, num_identities: Option<usize>, rng: &mut ChaCha8Rng) -> Result<IdenNetModel> {
        let identity = self.identity_for(variant)?;
        let emo = self.emotion.to_stream()?;
        let id = identity.map(|c| c.to_stream()).transpose()?;
        let mut model = IdenNetModel::build(variant, self.backbone(), num_expressions, num_identities, rng)?;
        model.load_pretrained_and_share(&emo.store, id.as_ref().map(|n| &n.store))?;
        model.freeze_feature_extractors();
        Ok(model)
    }

    /// Pre-pooled extractor outputs of every sample's center crop; the
    /// identity part is present when an identity checkpoint is.
    pub fn feature_bank(&self, samples: &[Sample]) -> Result<StreamFeatures> {
        let variant = if self.identity.is_some() { Variant::F } else { Variant::Original };
        let mut model = self.build(variant, 2, None, &mut ChaCha8Rng::seed_from_u64(0))?;
        let crops = center_crops(samples);
        let parts = crops
            .chunks(EVAL_BATCH)
            .map(|c| model.extract_features(&images_to_tensor(c.iter())?, true))
            .collect::<Result<Vec<_>>>()?;
        StreamFeatures::stack(&parts)
    }
}

/// Fine-tunes and evaluates one fold. `bank` holds cached features for all of
/// `samples` (see [`Pretrained::feature_bank`]) and is required when
/// `opts.cache_features` is set.
#[allow(clippy::too_many_arguments)]
pub fn finetune_fold(
    variant: Variant,
    pretrained: &Pretrained,
    samples: &[Sample],
    train_idx: &[usize],
    test_idx: &[usize],
    fold: usize,
    bank: Option<&StreamFeatures>,
    opts: &FinetuneOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FoldOutcome> {
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::InvalidArgument(format!("fold {fold} has an empty train or test split")));
    }
    opts.train.validate()?;
    let (num_expressions, num_identities) = class_counts(samples);
    let num_expressions = num_expressions.max(2);
    let id_classes = variant.has_identity_head().then_some(num_identities.max(2));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ fold as u64);
    let model = pretrained.build(variant, num_expressions, id_classes, &mut rng)?;
    let loss = LossConfig { num_expressions, num_identities: id_classes.unwrap_or(0), ..opts.loss };

    let pick = |idx: &[usize]| -> Vec<Sample> { idx.iter().map(|&i| samples[i].clone()).collect() };
    let (train, test) = if opts.cache_features {
        if opts.augment || opts.crop != CropPolicy::Center {
            return Err(Error::Config("cached features need augment=false and center crops".into()));
        }
        let bank = bank.ok_or_else(|| Error::InvalidArgument("cached training needs a feature bank".into()))?;
        let mut bank = bank.clone();
        if !variant.has_identity_stream() {
            bank.identity = None;
        }
        (
            TrainData { samples: pick(train_idx), features: Some(bank.gather(train_idx)?) },
            TrainData { samples: pick(test_idx), features: Some(bank.gather(test_idx)?) },
        )
    } else {
        let train = pick(train_idx);
        let train = if opts.augment { augment(&train) } else { train };
        (TrainData::from_samples(train), TrainData::from_samples(pick(test_idx)))
    };
    let targets: Vec<usize> = train.samples.iter().map(|s| s.expression).collect();
    let aux: Vec<usize> = train.samples.iter().map(|s| s.identity).collect();
    check_range(&targets, num_expressions)?;
    if let Some(n) = id_classes {
        check_range(&aux, n)?;
    }

    let mut trainer = Trainer::new(model, opts.train.clone(), loss, opts.crop, rng);
    let mut logs = Vec::new();
    let mut steps = Vec::new();
    for epoch in 0..opts.train.epochs {
        let lr = trainer.config.lr_at(epoch);
        let (loss, train_acc) = trainer.run_epoch(&train, &targets, &aux, |s| {
            if opts.record_steps {
                steps.push(*s);
            }
        })?;
        let log = EpochLog { stage: Stage::Finetune, fold: Some(fold), epoch, lr, loss, train_acc, val_acc: None };
        info!("{log}");
        on_epoch(&log);
        logs.push(log);
    }
    trainer.recalibrate_batch_norm(&train)?;
    let preds = predict_all(&mut trainer.net, &test)?;
    let labels: Vec<usize> = test.samples.iter().map(|s| s.expression).collect();
    let report = EvalReport::from_predictions(&labels, &preds, num_expressions)?;
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
        trainer.checkpoint().save(&fold_checkpoint_path(dir, fold))?;
    }
    Ok(FoldOutcome { fold, report, logs, steps, model: trainer.net })
}

pub fn fold_checkpoint_path(dir: &Path, fold: usize) -> PathBuf {
    dir.join(format!("fold_{fold:02}.ckpt"))
}

/// Cross-validated fine-tuning: one model per fold, trained on the other
/// folds and evaluated on the held-out one.
pub fn finetune(
    variant: Variant,
    pretrained: &Pretrained,
    samples: &[Sample],
    folds: &FoldSplit,
    opts: &FinetuneOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FinetuneOutcome> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty fine-tuning set".into()));
    }
    let bank = if opts.cache_features {
        let p = if variant.has_identity_stream() { *pretrained } else { Pretrained { identity: None, ..*pretrained } };
        Some(p.feature_bank(samples)?)
    } else {
        None
    };
    let mut outcomes = Vec::with_capacity(folds.k);
    for fold in 0..folds.k {
        let (train_idx, test_idx) = folds.split(samples, fold)?;
        outcomes.push(finetune_fold(variant, pretrained, samples, &train_idx, &test_idx, fold, bank.as_ref(), opts, &mut on_epoch)?);
    }
    let reports: Vec<EvalReport> = outcomes.iter().map(|o| o.report.clone()).collect();
    Ok(FinetuneOutcome { report: EvalReport::merge_folds(&reports)?, folds: outcomes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};

    #[test]
    fn argmax_prefers_first_on_ties() {
        let t = Tensor::from_parts(vec![2, 3], vec![1.0, 3.0, 3.0, -1.0, -2.0, -1.0]);
        assert_eq!(argmax_rows(&t).unwrap(), vec![1, 0]);
    }

    #[test]
    fn crop_policy_parsing() {
        assert_eq!("center".parse::<CropPolicy>().unwrap(), CropPolicy::Center);
        assert!("middle".parse::<CropPolicy>().is_err());
    }

    fn tiny() -> Vec<Sample> {
        synth_generate(&SynthSpec { num_identities: 2, num_expressions: 2, samples_per_cell: 3, sessions: 3, ..SynthSpec::default() }).unwrap()
    }

    #[test]
    fn pretrain_rejects_empty_and_out_of_range() {
        let b = BackboneConfig::from_depth(16).unwrap();
        assert!(pretrain(StreamTask::Emotion, &[], b, &PretrainOptions::default(), |_| {}).is_err());
        let opts = PretrainOptions { num_classes: Some(1), ..PretrainOptions::default() };
        assert!(matches!(
            pretrain(StreamTask::Emotion, &tiny(), b, &opts, |_| {}),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn pretrained_pair_is_validated() {
        let b = BackboneConfig::from_depth(16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let emo = Checkpoint::from_stream(&StreamNet::build(StreamTask::Emotion, b, 6, &mut rng).unwrap(), 0, &rng, None);
        let id = Checkpoint::from_stream(&StreamNet::build(StreamTask::Identity, b, 8, &mut rng).unwrap(), 0, &rng, None);
        assert!(Pretrained::new(&id, None).is_err());
        assert!(Pretrained::new(&emo, Some(&emo)).is_err());
        let p = Pretrained::new(&emo, Some(&id)).unwrap();
        assert!(Pretrained::new(&emo, None).unwrap().build(Variant::F, 6, None, &mut rng).is_err());
        let m = p.build(Variant::Original, 6, None, &mut rng).unwrap();
        assert!(m.extractors_frozen());
    }

    #[test]
    fn recalibration_uses_dropout_free_batch_statistics() {
        let samples = tiny();
        let targets: Vec<usize> = samples.iter().map(|s| s.expression).collect();
        let data = TrainData::from_samples(samples);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = StreamNet::build(StreamTask::Emotion, BackboneConfig::from_depth(16).unwrap(), 2, &mut rng).unwrap();
        let config = TrainConfig { batch_size: 16, epochs: 1, ..TrainConfig::pretrain() };
        let mut trainer = Trainer::new(net, config, LossConfig::default(), CropPolicy::Random, rng);
        trainer.run_epoch(&data, &targets, &[], |_| {}).unwrap();
        let params: Vec<Tensor<f32>> = trainer.net.store().params().iter().map(|p| p.value.clone()).collect();
        let rng_before = trainer.rng.clone();

        // oracle: one dropout-free pass from zeroed statistics leaves (1 - momentum) x batch statistics
        let mut oracle = trainer.net.clone();
        for i in 0..oracle.store().stats().len() {
            let st = oracle.store_mut().stats_mut(BnId(i));
            st.mean.iter_mut().chain(st.var.iter_mut()).for_each(|v| *v = 0.0);
        }
        let all: Vec<usize> = (0..data.len()).collect();
        oracle.forward_statistics(&data.batch(&all, CropPolicy::Center, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()).unwrap();

        trainer.recalibrate_batch_norm(&data).unwrap();
        let w = 1.0 - BatchNormConfig::default().momentum as f32;
        for ((name, got), (_, want)) in trainer.net.store().stats().iter().zip(oracle.store().stats()) {
            for (g, o) in got.mean.iter().chain(&got.var).zip(want.mean.iter().chain(&want.var)) {
                assert!((g - o / w).abs() <= 1e-4 * (1.0 + g.abs()), "{name}: {g} vs {}", o / w);
            }
        }
        assert!(trainer.net.store().params().iter().zip(&params).all(|(p, v)| &p.value == v));
        assert_eq!(trainer.rng, rng_before);
    }

    #[test]
    fn epoch_log_line() {
        let log = EpochLog {
            stage: Stage::Finetune,
            fold: Some(2),
            epoch: 5,
            lr: 0.01,
            loss: JointLossValue::new(1.5, 0.25),
            train_acc: 0.5,
            val_acc: None,
        };
        assert_eq!(
            log.to_string(),
            "stage=finetune fold=2 epoch=5 lr=0.01 l_emo=1.500000 l_id=0.250000 total=1.750000 train_acc=0.5000"
        );
    }
}
