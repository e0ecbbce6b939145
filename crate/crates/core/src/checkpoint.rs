//! Single-file binary checkpoints.
//!
//! Layout, all integers little-endian: magic `IDEN`, `u32` format version,
//! the model header, then length-prefixed parameter, batch-norm and optional
//! velocity records, the epoch and the generator state. Strings are a `u32`
//! byte length followed by UTF-8; tensors are a `u32` rank, `u32` dims and
//! `f32` data.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{IdenNetModel, StreamNet, StreamTask, Variant};
use crate::nn::BackboneConfig;
use crate::ops::BatchNormStats;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"IDEN";
pub const FORMAT_VERSION: u32 = 1;

/// Which network the parameters belong to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Stream { task: StreamTask, num_classes: usize },
    IdenNet { variant: Variant, num_expressions: usize, num_identities: Option<usize> },
}

/// Exact position of a ChaCha8 generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub backbone: BackboneConfig,
    pub kind: ModelKind,
    pub store: ParamStore,
    pub velocity: Option<BTreeMap<String, Tensor<f32>>>,
    pub epoch: u64,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn from_model(model: &IdenNetModel, epoch: u64, rng: &ChaCha8Rng, velocity: Option<&BTreeMap<String, Tensor<f32>>>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            backbone: model.backbone,
            kind: ModelKind::IdenNet {
                variant: model.variant,
                num_expressions: model.num_expressions,
                num_identities: model.num_identities,
            },
            store: model.store.clone(),
            velocity: velocity.cloned(),
            epoch,
            rng: RngState::capture(rng),
        }
    }

    pub fn from_stream(net: &StreamNet, epoch: u64, rng: &ChaCha8Rng, velocity: Option<&BTreeMap<String, Tensor<f32>>>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            backbone: net.backbone,
            kind: ModelKind::Stream { task: net.task, num_classes: net.num_classes },
            store: net.store.clone(),
            velocity: velocity.cloned(),
            epoch,
            rng: RngState::capture(rng),
        }
    }

    /// Rebuilds the IDEnNet model; every parameter and statistic must match
    /// the architecture by name and shape.
    pub fn to_model(&self) -> Result<IdenNetModel> {
        let ModelKind::IdenNet { variant, num_expressions, num_identities } = self.kind else {
            return Err(Error::Checkpoint("checkpoint holds a single-stream network, not an IDEnNet model".into()));
        };
        let mut model = IdenNetModel::build(variant, self.backbone, num_expressions, num_identities, &mut ChaCha8Rng::seed_from_u64(0))?;
        copy_store(&self.store, &mut model.store)?;
        Ok(model)
    }

    pub fn to_stream(&self) -> Result<StreamNet> {
        let ModelKind::Stream { task, num_classes } = self.kind else {
            return Err(Error::Checkpoint("checkpoint holds an IDEnNet model, not a single-stream network".into()));
        };
        let mut net = StreamNet::build(task, self.backbone, num_classes, &mut ChaCha8Rng::seed_from_u64(0))?;
        copy_store(&self.store, &mut net.store)?;
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(self.format_version);
        w.u32(self.backbone.depth);
        w.u32(self.backbone.growth_rate as u32);
        w.u32(self.backbone.layers_per_block as u32);
        w.u32(self.backbone.initial_channels as u32);
        match self.kind {
            ModelKind::Stream { task, num_classes } => {
                w.u8(0);
                w.u8(match task {
                    StreamTask::Emotion => 0,
                    StreamTask::Identity => 1,
                });
                w.u32(num_classes as u32);
            }
            ModelKind::IdenNet { variant, num_expressions, num_identities } => {
                w.u8(1);
                w.u8(variant.tag());
                w.u32(num_expressions as u32);
                w.u32(num_identities.unwrap_or(0) as u32);
            }
        }
        w.u32(self.store.len() as u32);
        for p in self.store.params() {
            w.str(&p.name);
            w.u8(p.kind.tag());
            w.u8(p.frozen as u8);
            w.tensor(&p.value);
        }
        w.u32(self.store.stats().len() as u32);
        for (name, st) in self.store.stats() {
            w.str(name);
            w.u32(st.channels() as u32);
            w.f32s(&st.mean);
            w.f32s(&st.var);
            w.u64(st.updates);
        }
        match &self.velocity {
            None => w.u8(0),
            Some(v) => {
                w.u8(1);
                w.u32(v.len() as u32);
                for (name, t) in v {
                    w.str(name);
                    w.tensor(t);
                }
            }
        }
        w.u64(self.epoch);
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let format_version = r.u32()?;
        if format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {format_version}")));
        }
        let depth = r.u32()?;
        let backbone = BackboneConfig::from_depth(depth).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let stored = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        if stored != (backbone.growth_rate, backbone.layers_per_block, backbone.initial_channels) {
            return Err(Error::Checkpoint(format!("backbone fields {stored:?} inconsistent with depth {depth}")));
        }
        let kind = match r.u8()? {
            0 => {
                let task = match r.u8()? {
                    0 => StreamTask::Emotion,
                    1 => StreamTask::Identity,
                    t => return Err(Error::Checkpoint(format!("unknown stream task tag {t}"))),
                };
                ModelKind::Stream { task, num_classes: r.u32()? as usize }
            }
            1 => {
                let tag = r.u8()?;
                let variant = Variant::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown variant tag {tag}")))?;
                let num_expressions = r.u32()? as usize;
                let n = r.u32()? as usize;
                ModelKind::IdenNet { variant, num_expressions, num_identities: (n > 0).then_some(n) }
            }
            t => return Err(Error::Checkpoint(format!("unknown model kind tag {t}"))),
        };
        let mut store = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let tag = r.u8()?;
            let kind = ParamKind::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("{name}: unknown parameter kind {tag}")))?;
            let frozen = r.u8()? != 0;
            let value = r.tensor()?;
            let id = store.add(name, value, kind).map_err(|e| Error::Checkpoint(e.to_string()))?;
            store.param_mut(id).frozen = frozen;
        }
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let c = r.u32()? as usize;
            let mean = r.f32s(c)?;
            let var = r.f32s(c)?;
            let updates = r.u64()?;
            store
                .add_stats(name, BatchNormStats { mean, var, updates })
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        let velocity = match r.u8()? {
            0 => None,
            1 => {
                let mut v = BTreeMap::new();
                for _ in 0..r.u32()? {
                    let name = r.str()?;
                    let t = r.tensor()?;
                    if v.insert(name.clone(), t).is_some() {
                        return Err(Error::Checkpoint(format!("duplicate velocity entry {name}")));
                    }
                }
                Some(v)
            }
            t => return Err(Error::Checkpoint(format!("bad velocity flag {t}"))),
        };
        let epoch = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { format_version, backbone, kind, store, velocity, epoch, rng: RngState { seed, stream, word_pos } })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Copies values, frozen flags and statistics from `src` into `dst`, which
/// must hold exactly the same names.
fn copy_store(src: &ParamStore, dst: &mut ParamStore) -> Result<()> {
    let expected: HashSet<&str> = dst.params().iter().map(|p| p.name.as_str()).collect();
    if let Some(extra) = src.params().iter().find(|p| !expected.contains(p.name.as_str())) {
        return Err(Error::Checkpoint(format!("unexpected parameter {}", extra.name)));
    }
    if src.len() != dst.len() {
        return Err(Error::Checkpoint(format!("checkpoint has {} parameters, model expects {}", src.len(), dst.len())));
    }
    for p in src.params() {
        dst.set_value(&p.name, p.value.clone())?;
        let id = dst.find(&p.name).expect("checked above");
        dst.param_mut(id).frozen = p.frozen;
    }
    if src.stats().len() != dst.stats().len() {
        return Err(Error::Checkpoint("batch-norm statistics do not match the model".into()));
    }
    for (name, st) in src.stats() {
        dst.set_stats(name, st.clone())?;
    }
    Ok(())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn tensor(&mut self, t: &Tensor<f32>) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        self.f32s(t.data());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Checkpoint("shape overflow".into()))?;
        let data = self.f32s(n)?;
        Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn model() -> (IdenNetModel, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = IdenNetModel::build(Variant::IF, BackboneConfig::from_depth(16).unwrap(), 6, Some(8), &mut rng).unwrap();
        m.freeze_feature_extractors();
        let _: u64 = rng.random();
        (m, rng)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (m, rng) = model();
        let mut vel = BTreeMap::new();
        vel.insert("fc_emo.weight".to_string(), Tensor::full(m.store.get("fc_emo.weight").unwrap().value.shape(), 0.25f32));
        let ck = Checkpoint::from_model(&m, 7, &rng, Some(&vel));
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);

        let restored = back.to_model().unwrap();
        assert_eq!(restored.store, m.store);
        assert_eq!(back.rng.restore(), rng);
    }

    #[test]
    fn stream_checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = StreamNet::build(StreamTask::Identity, BackboneConfig::from_depth(16).unwrap(), 8, &mut rng).unwrap();
        let ck = Checkpoint::from_stream(&net, 0, &rng, None);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.to_stream().unwrap().store, net.store);
        assert!(back.to_model().is_err());
    }

    #[test]
    fn rejects_corruption() {
        let (m, rng) = model();
        let bytes = Checkpoint::from_model(&m, 0, &rng, None).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn model_mismatch_is_reported() {
        let (m, rng) = model();
        let mut ck = Checkpoint::from_model(&m, 0, &rng, None);
        ck.kind = ModelKind::IdenNet { variant: Variant::Original, num_expressions: 6, num_identities: None };
        assert!(ck.to_model().is_err());
    }
}
