//! Momentum SGD with weight decay and the two-drop step schedule.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            other => Err(Error::InvalidArgument(format!("unknown stage {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub stage: Stage,
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let (base_lr, epochs) = match stage {
            Stage::Pretrain => (0.1, 60),
            Stage::Finetune => (0.01, 100),
        };
        Self { base_lr, momentum: 0.9, weight_decay: 1e-4, batch_size: 128, epochs, dropout_rate: 0.5, stage }
    }

    pub fn pretrain() -> Self {
        Self::for_stage(Stage::Pretrain)
    }

    pub fn finetune() -> Self {
        Self::for_stage(Stage::Finetune)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return bad(format!("base_lr must be finite and non-negative, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_schedule(epoch, self.epochs, self.base_lr)
    }
}

/// `base_lr` until `floor(0.5·total)`, a tenth of it until `floor(0.75·total)`,
/// a hundredth afterwards. Each drop takes effect at its boundary epoch.
pub fn lr_schedule(epoch: usize, total_epochs: usize, base_lr: f64) -> f64 {
    let first = total_epochs / 2;
    let second = total_epochs * 3 / 4;
    if epoch >= second {
        base_lr / 100.0
    } else if epoch >= first {
        base_lr / 10.0
    } else {
        base_lr
    }
}

/// First epoch trained at the reduced rate.
pub fn first_drop_epoch(total_epochs: usize) -> usize {
    total_epochs / 2
}

/// One in-place update: `v ← μ·v + g + wd·p`, then `p ← p − lr·v`.
pub fn sgd_step(param: &mut [f32], grad: &[f32], velocity: &mut [f32], lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if grad.len() != param.len() || velocity.len() != param.len() {
        return Err(shape_err(
            "sgd_step",
            format!("param {}, grad {}, velocity {}", param.len(), grad.len(), velocity.len()),
        ));
    }
    let (lr, mu, wd) = (lr as f32, momentum as f32, weight_decay as f32);
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Velocity buffers keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.momentum, cfg.weight_decay)
    }

    pub fn velocity(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: BTreeMap<String, Tensor<f32>>) {
        self.velocity = velocity;
    }

    /// Applies `grads` (indexed like `store.params()`). Frozen parameters and
    /// parameters without a gradient are left untouched; weight decay applies
    /// to convolution and linear weights only.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor<f32>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(shape_err("sgd", format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        for (id, grad) in store.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            let p = store.param_mut(id);
            let Some(grad) = grad else { continue };
            if p.frozen {
                return Err(Error::InvalidArgument(format!("gradient supplied for frozen parameter {}", p.name)));
            }
            if grad.shape() != p.value.shape() {
                return Err(shape_err("sgd", format!("{}: grad {:?} vs param {:?}", p.name, grad.shape(), p.value.shape())));
            }
            let wd = if p.kind.decays() { self.weight_decay } else { 0.0 };
            let v = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            sgd_step(p.value.data_mut(), grad.data(), v.data_mut(), lr, self.momentum, wd)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use proptest::prelude::*;

    #[test]
    fn plain_sgd_without_momentum_or_decay() {
        let mut p = vec![1.0f32, -2.0];
        let mut v = vec![0.0f32; 2];
        sgd_step(&mut p, &[0.5, 0.25], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p, vec![1.0 - 0.1f32 * 0.5, -2.0 - 0.1f32 * 0.25]);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![3.0f32, 4.0];
        let mut v = vec![0.0f32; 2];
        sgd_step(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p, vec![3.0, 4.0]);
    }

    #[test]
    fn second_step_moves_one_point_nine_lr_g() {
        let (lr, g) = (0.01f64, 0.5f64);
        let mut p = vec![0.0f32];
        let mut v = vec![0.0f32];
        sgd_step(&mut p, &[g as f32], &mut v, lr, 0.9, 0.0).unwrap();
        let after_one = p[0] as f64;
        sgd_step(&mut p, &[g as f32], &mut v, lr, 0.9, 0.0).unwrap();
        let delta2 = after_one - p[0] as f64;
        assert!((delta2 - 1.9 * lr * g).abs() < 1e-8, "{delta2}");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = vec![0.0f32; 2];
        let mut v = vec![0.0f32; 2];
        assert!(sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(0, 100, 0.01), 0.01);
        assert!((lr_schedule(50, 100, 0.01) - 0.001).abs() < 1e-15);
        assert!((lr_schedule(75, 100, 0.01) - 0.0001).abs() < 1e-15);
        assert_eq!(lr_schedule(49, 100, 0.01), 0.01);
        assert_eq!(lr_schedule(2, 5, 1.0), 0.1);
        assert_eq!(lr_schedule(3, 5, 1.0), 0.01);
    }

    #[test]
    fn stage_defaults() {
        let p = TrainConfig::pretrain();
        let f = TrainConfig::finetune();
        assert_eq!((p.base_lr, p.epochs, p.batch_size), (0.1, 60, 128));
        assert_eq!((f.base_lr, f.epochs, f.momentum, f.weight_decay), (0.01, 100, 0.9, 1e-4));
        p.validate().unwrap();
        assert!(TrainConfig { momentum: 1.0, ..f }.validate().is_err());
    }

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::full(&[2, 2], 1.0), ParamKind::ConvWeight).unwrap();
        s.add("a.bias", Tensor::full(&[2], 1.0), ParamKind::Bias).unwrap();
        s.add("b.weight", Tensor::full(&[3], 1.0), ParamKind::LinearWeight).unwrap();
        s
    }

    #[test]
    fn decay_skips_biases_and_frozen_params_are_untouched() {
        let mut s = store();
        s.freeze_prefix("b.");
        let before = s.get("b.weight").unwrap().value.clone();
        let mut opt = Sgd::new(0.0, 0.5);
        let grads = vec![Some(Tensor::zeros(&[2, 2])), Some(Tensor::zeros(&[2])), None];
        opt.step(&mut s, &grads, 0.1).unwrap();
        assert_eq!(s.get("a.weight").unwrap().value.data(), &[0.95f32; 4]);
        assert_eq!(s.get("a.bias").unwrap().value.data(), &[1.0f32; 2]);
        assert_eq!(s.get("b.weight").unwrap().value, before);
        assert!(!opt.velocity().contains_key("b.weight"));

        let bad = vec![None, None, Some(Tensor::zeros(&[3]))];
        assert!(opt.step(&mut s, &bad, 0.1).is_err());
    }

    proptest! {
        #[test]
        fn schedule_non_increasing_with_three_values(total in 4usize..400, base in 1e-4f64..1.0) {
            let lrs: Vec<f64> = (0..total).map(|e| lr_schedule(e, total, base)).collect();
            prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
            let mut distinct = lrs.clone();
            distinct.dedup();
            prop_assert_eq!(distinct.len(), 3);
        }

        #[test]
        fn zero_lr_never_moves_params(
            p in proptest::collection::vec(-10f32..10.0, 1..16),
            seed in any::<u64>(),
        ) {
            let g: Vec<f32> = p.iter().enumerate().map(|(i, _)| ((seed.rotate_left(i as u32) % 1000) as f32) - 500.0).collect();
            let mut q = p.clone();
            let mut v = vec![0.0f32; p.len()];
            sgd_step(&mut q, &g, &mut v, 0.0, 0.9, 1e-4).unwrap();
            prop_assert_eq!(q, p);
        }
    }
}
