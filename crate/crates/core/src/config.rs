//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys mirror the
//! fields of [`TrainConfig`], [`LossConfig`], the backbone depth and
//! [`SynthSpec`].

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::Variant;
use crate::optim::{Stage, TrainConfig};
use crate::train::CropPolicy;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub depth: u32,
    pub variant: Variant,
    pub seed: u64,
    pub folds: usize,
    pub augment: bool,
    pub train_crop: CropPolicy,
    /// Train the fusion part on cached, pre-pooled extractor outputs
    /// (requires center-crop training and no augmentation).
    pub cache_features: bool,
    /// Share of the pretraining data held out for checkpoint selection.
    pub validation_fraction: f64,
    pub synth: SynthSpec,
}

impl RunConfig {
    pub fn for_stage(stage: Stage) -> Self {
        Self {
            train: TrainConfig::for_stage(stage),
            loss: LossConfig::default(),
            depth: 40,
            variant: Variant::IF,
            seed: 0,
            folds: 10,
            augment: true,
            train_crop: CropPolicy::Random,
            cache_features: false,
            validation_fraction: 0.1,
            synth: SynthSpec::default(),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
        }
        let v = value;
        match key {
            "base_lr" => self.train.base_lr = parse(key, v)?,
            "momentum" => self.train.momentum = parse(key, v)?,
            "weight_decay" => self.train.weight_decay = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "dropout_rate" => self.train.dropout_rate = parse(key, v)?,
            "stage" => self.train.stage = v.parse()?,
            "alpha" => self.loss.alpha = parse(key, v)?,
            "gamma" => self.loss.gamma = parse(key, v)?,
            "depth" => self.depth = parse(key, v)?,
            "variant" => self.variant = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "folds" => self.folds = parse(key, v)?,
            "augment" => self.augment = parse(key, v)?,
            "train_crop" => self.train_crop = v.parse()?,
            "cache_features" => self.cache_features = parse(key, v)?,
            "validation_fraction" => self.validation_fraction = parse(key, v)?,
            "num_identities" => self.synth.num_identities = parse(key, v)?,
            "num_expressions" => self.synth.num_expressions = parse(key, v)?,
            "samples_per_cell" => self.synth.samples_per_cell = parse(key, v)?,
            "variation_strength" => self.synth.variation_strength = parse(key, v)?,
            "noise_sigma" => self.synth.noise_sigma = parse(key, v)?,
            "sessions" => self.synth.sessions = parse(key, v)?,
            "signature_seed" => self.synth.signature_seed = parse(key, v)?,
            "synth_seed" => self.synth.seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other}"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        self.validate()
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.loss.validate()?;
        self.synth.validate()?;
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!("validation_fraction must lie in [0, 1), got {}", self.validation_fraction)));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("need at least 2 folds, got {}", self.folds)));
        }
        if self.cache_features && (self.augment || self.train_crop != CropPolicy::Center) {
            return Err(Error::Config("cache_features needs augment=false and train_crop=center".into()));
        }
        Ok(())
    }

    /// The configuration as `key=value` lines, readable by [`apply_text`](Self::apply_text).
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let s = &self.synth;
        let pairs: Vec<(&str, String)> = vec![
            ("stage", t.stage.to_string()),
            ("base_lr", t.base_lr.to_string()),
            ("momentum", t.momentum.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("dropout_rate", t.dropout_rate.to_string()),
            ("alpha", self.loss.alpha.to_string()),
            ("gamma", self.loss.gamma.to_string()),
            ("depth", self.depth.to_string()),
            ("variant", self.variant.to_string()),
            ("seed", self.seed.to_string()),
            ("folds", self.folds.to_string()),
            ("augment", self.augment.to_string()),
            ("train_crop", self.train_crop.to_string()),
            ("cache_features", self.cache_features.to_string()),
            ("validation_fraction", self.validation_fraction.to_string()),
            ("num_identities", s.num_identities.to_string()),
            ("num_expressions", s.num_expressions.to_string()),
            ("samples_per_cell", s.samples_per_cell.to_string()),
            ("variation_strength", s.variation_strength.to_string()),
            ("noise_sigma", s.noise_sigma.to_string()),
            ("sessions", s.sessions.to_string()),
            ("signature_seed", s.signature_seed.to_string()),
            ("synth_seed", s.seed.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_overrides_and_reports_lines() {
        let mut c = RunConfig::for_stage(Stage::Finetune);
        c.apply_text("# comment\n\nbase_lr = 0.05\nvariant=f\ndepth=16\n").unwrap();
        assert_eq!((c.train.base_lr, c.variant, c.depth), (0.05, Variant::F, 16));
        assert_eq!(c.train.epochs, 100);

        let err = RunConfig::for_stage(Stage::Finetune).apply_text("epochs=3\nnonsense\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(RunConfig::for_stage(Stage::Pretrain).apply_text("colour=blue").is_err());
        assert!(RunConfig::for_stage(Stage::Pretrain).apply_text("batch_size=x").is_err());
        assert!(RunConfig::for_stage(Stage::Pretrain).apply_text("cache_features=true").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::for_stage(Stage::Pretrain);
        c.apply_text("alpha=0.25\ntrain_crop=center\naugment=false\ncache_features=true\nnoise_sigma=3.5").unwrap();
        let mut d = RunConfig::for_stage(Stage::Finetune);
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
    }
}
