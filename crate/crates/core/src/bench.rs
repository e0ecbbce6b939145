//! Paired-seed variant comparison on the synthetic benchmark.
//!
//! Both streams are pretrained once on a separate synthetic population (other
//! identities, other noise draw). Each seed then renders the benchmark with
//! its own noise, splits it into subject-disjoint folds and fine-tunes every
//! variant on identical folds from the same pretrained weights, training the
//! fusion part on cached extractor outputs.

use std::collections::BTreeMap;

use crate::checkpoint::Checkpoint;
use crate::data::{make_folds, synth_generate, SynthSpec};
use crate::error::Result;
use crate::loss::LossConfig;
use crate::model::{StreamTask, Variant};
use crate::nn::BackboneConfig;
use crate::optim::TrainConfig;
use crate::train::{finetune_fold, pretrain, CropPolicy, EpochLog, FinetuneOptions, PretrainOptions, Pretrained};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub depth: u32,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub folds: usize,
    /// Benchmark population; `seed` is replaced by each run seed.
    pub benchmark: SynthSpec,
    pub pretrain_data: SynthSpec,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub loss: LossConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            depth: 16,
            seeds: vec![0, 1, 2, 3, 4],
            variants: vec![Variant::Original, Variant::F, Variant::IF],
            folds: 10,
            benchmark: SynthSpec::default(),
            pretrain_data: SynthSpec {
                num_identities: 16,
                samples_per_cell: 10,
                signature_seed: 1000,
                seed: 1000,
                ..SynthSpec::default()
            },
            pretrain: TrainConfig { epochs: 12, batch_size: 32, ..TrainConfig::pretrain() },
            finetune: TrainConfig { epochs: 12, batch_size: 32, ..TrainConfig::finetune() },
            loss: LossConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub config: AblationConfig,
    pub seeds: Vec<u64>,
    /// Mean fold accuracy per variant, one entry per seed.
    pub accuracies: BTreeMap<Variant, Vec<f64>>,
    /// Epoch logs of every IF fold run.
    pub if_logs: Vec<EpochLog>,
    pub emotion_val_accuracy: Option<f64>,
    pub identity_val_accuracy: Option<f64>,
}

impl AblationResult {
    pub fn per_seed(&self, variant: Variant) -> &[f64] {
        self.accuracies.get(&variant).map_or(&[], Vec::as_slice)
    }

    /// Mean over seeds; NaN if the variant was not run.
    pub fn mean(&self, variant: Variant) -> f64 {
        let v = self.per_seed(variant);
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn pretrain_streams(cfg: &AblationConfig, mut log: impl FnMut(&str)) -> Result<(Checkpoint, Checkpoint, Option<f64>, Option<f64>)> {
    let data = synth_generate(&cfg.pretrain_data)?;
    let backbone = BackboneConfig::from_depth(cfg.depth)?;
    let opts = PretrainOptions {
        train: cfg.pretrain.clone(),
        seed: cfg.pretrain_data.seed,
        augment: false,
        crop: CropPolicy::Center,
        ..PretrainOptions::default()
    };
    let emo = pretrain(StreamTask::Emotion, &data, backbone, &opts, |l| log(&format!("emotion {l}")))?;
    let id = pretrain(StreamTask::Identity, &data, backbone, &opts, |l| log(&format!("identity {l}")))?;
    Ok((emo.best, id.best, emo.best_val_accuracy, id.best_val_accuracy))
}

/// Runs every variant on every seed and fold; `log` receives progress lines.
pub fn run_ablation(cfg: &AblationConfig, mut log: impl FnMut(&str)) -> Result<AblationResult> {
    let (emo, id, emo_val, id_val) = pretrain_streams(cfg, &mut log)?;
    let mut r = run_ablation_from(cfg, &emo, &id, log)?;
    r.emotion_val_accuracy = emo_val;
    r.identity_val_accuracy = id_val;
    Ok(r)
}

/// Fine-tuning half of [`run_ablation`], starting from given stream checkpoints.
pub fn run_ablation_from(cfg: &AblationConfig, emo: &Checkpoint, id: &Checkpoint, mut log: impl FnMut(&str)) -> Result<AblationResult> {
    let pretrained = Pretrained::new(emo, Some(id))?;
    let mut accuracies: BTreeMap<Variant, Vec<f64>> = BTreeMap::new();
    let mut if_logs = Vec::new();
    for &seed in &cfg.seeds {
        let samples = synth_generate(&SynthSpec { seed, ..cfg.benchmark.clone() })?;
        let folds = make_folds(&samples, cfg.folds, seed)?;
        let bank = pretrained.feature_bank(&samples)?;
        let opts = FinetuneOptions {
            train: cfg.finetune.clone(),
            loss: cfg.loss,
            seed,
            augment: false,
            crop: CropPolicy::Center,
            cache_features: true,
            out_dir: None,
            record_steps: false,
        };
        for &variant in &cfg.variants {
            let mut fold_acc = Vec::with_capacity(cfg.folds);
            for fold in 0..cfg.folds {
                let (train_idx, test_idx) = folds.split(&samples, fold)?;
                let out = finetune_fold(variant, &pretrained, &samples, &train_idx, &test_idx, fold, Some(&bank), &opts, |l| {
                    if variant == Variant::IF {
                        if_logs.push(l.clone());
                    }
                })?;
                fold_acc.push(out.report.accuracy);
            }
            let mean = fold_acc.iter().sum::<f64>() / fold_acc.len() as f64;
            log(&format!("seed={seed} variant={variant} mean_fold_acc={mean:.4}"));
            accuracies.entry(variant).or_default().push(mean);
        }
    }
    Ok(AblationResult {
        config: cfg.clone(),
        seeds: cfg.seeds.clone(),
        accuracies,
        if_logs,
        emotion_val_accuracy: None,
        identity_val_accuracy: None,
    })
}
