//! Named parameter storage and the per-step forward session.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::ops::{BatchNormConfig, BatchNormStats};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BnId(pub(crate) usize);

/// What a parameter is, which decides whether weight decay applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    LinearWeight,
    Bias,
    BnGamma,
    BnBeta,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::LinearWeight)
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            ParamKind::ConvWeight => 0,
            ParamKind::LinearWeight => 1,
            ParamKind::Bias => 2,
            ParamKind::BnGamma => 3,
            ParamKind::BnBeta => 4,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => ParamKind::ConvWeight,
            1 => ParamKind::LinearWeight,
            2 => ParamKind::Bias,
            3 => ParamKind::BnGamma,
            4 => ParamKind::BnBeta,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
    pub kind: ParamKind,
    pub frozen: bool,
}

/// All learnable tensors and batch-norm running statistics of a network,
/// in creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    stats: Vec<(String, BatchNormStats<f32>)>,
    index: HashMap<String, usize>,
    stats_index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<f32>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, kind, frozen: false });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_stats(&mut self, name: impl Into<String>, stats: BatchNormStats<f32>) -> Result<BnId> {
        let name = name.into();
        if self.stats_index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate batch-norm name {name}")));
        }
        self.stats_index.insert(name.clone(), self.stats.len());
        self.stats.push((name, stats));
        Ok(BnId(self.stats.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn stats(&self) -> &[(String, BatchNormStats<f32>)] {
        &self.stats
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn stats_mut(&mut self, id: BnId) -> &mut BatchNormStats<f32> {
        &mut self.stats[id.0].1
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn find_stats(&self, name: &str) -> Option<BnId> {
        self.stats_index.get(name).map(|&i| BnId(i))
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.find(name).map(|id| self.param(id))
    }

    pub fn get_stats(&self, name: &str) -> Option<&BatchNormStats<f32>> {
        self.find_stats(name).map(|id| &self.stats[id.0].1)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Freezes every parameter whose name starts with `prefix`; returns how many.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = true;
            n += 1;
        }
        n
    }

    pub fn frozen_names(&self) -> Vec<&str> {
        self.params.iter().filter(|p| p.frozen).map(|p| p.name.as_str()).collect()
    }

    /// Overwrites a parameter's value, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<f32>) -> Result<()> {
        let id = self.find(name).ok_or_else(|| Error::Checkpoint(format!("no parameter named {name}")))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?} does not match {:?}",
                value.shape(),
                p.value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn set_stats(&mut self, name: &str, stats: BatchNormStats<f32>) -> Result<()> {
        let id = self.find_stats(name).ok_or_else(|| Error::Checkpoint(format!("no batch norm named {name}")))?;
        let slot = &mut self.stats[id.0].1;
        if slot.channels() != stats.channels() {
            return Err(Error::Checkpoint(format!(
                "{name}: {} channels does not match {}",
                stats.channels(),
                slot.channels()
            )));
        }
        *slot = stats;
        Ok(())
    }
}

/// One forward (and optionally backward) pass: a fresh graph plus lazily
/// bound parameter leaves. Frozen parameters are bound as constants.
pub struct Session<'a> {
    pub graph: Graph<f32>,
    pub mode: Mode,
    pub dropout_rate: f64,
    pub bn: BatchNormConfig,
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    bound: Vec<Option<Var>>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a mut ParamStore, mode: Mode, dropout_rate: f64, rng: &'a mut ChaCha8Rng) -> Self {
        let n = store.len();
        Self {
            graph: Graph::new(),
            mode,
            dropout_rate,
            bn: BatchNormConfig::default(),
            store,
            rng,
            bound: vec![None; n],
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = &self.store.params[id.0];
        let v = self.graph.leaf(p.value.clone(), !p.frozen);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.store.params[id.0].frozen
    }

    pub fn batch_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, stats: BnId, mode: Mode) -> Result<Var> {
        let g = self.param(gamma);
        let b = self.param(beta);
        let cfg = self.bn;
        self.graph.batch_norm(x, g, b, &mut self.store.stats[stats.0].1, mode, cfg)
    }

    /// Per-channel `(x - mean) / sqrt(var + eps)` with fixed statistics;
    /// passes `x` through unchanged while the statistics are unpopulated.
    pub fn standardize(&mut self, x: Var, stats: BnId) -> Result<Var> {
        if !self.store.stats[stats.0].1.is_populated() {
            return Ok(x);
        }
        let c = self.store.stats[stats.0].1.channels();
        let ones = self.graph.constant(Tensor::ones(&[c]));
        let zeros = self.graph.constant(Tensor::zeros(&[c]));
        let cfg = self.bn;
        self.graph.batch_norm(x, ones, zeros, &mut self.store.stats[stats.0].1, Mode::Eval, cfg)
    }

    pub fn dropout(&mut self, x: Var, mode: Mode) -> Result<Var> {
        let rate = self.dropout_rate;
        self.graph.dropout(x, rate, mode, self.rng)
    }

    /// Gradients for every bound, trainable parameter after `graph.backward`.
    pub fn param_grads(&self) -> Vec<Option<Tensor<f32>>> {
        self.bound.iter().map(|b| b.and_then(|v| self.graph.grad(v))).collect()
    }
}
