//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DADS" | version u32 | meta_len u64 | meta JSON
//! count u64 | count × (name_len u64 | name | rank u64 | dims u64… | f32 payload)
//! crc32 u32 over every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamWState;
use super::{EpochMetrics, TrainConfig};
use crate::error::{bail, Error, Result};
use crate::model::{AdapterSpec, BranchKey, DualPair, ModelConfig, ParamKey, ParamStore};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"DADS";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub adapter: AdapterSpec,
    pub train: Option<TrainConfig>,
    pub step: u64,
    pub epoch: usize,
    pub metrics: Vec<EpochMetrics>,
}

impl CheckpointMeta {
    pub fn new(model: ModelConfig) -> Self {
        Self { adapter: model.adapter, model, train: None, step: 0, epoch: 0, metrics: Vec::new() }
    }
}

/// Everything a checkpoint can hold; only `store` and `meta` are required.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub store: ParamStore,
    pub ema: Option<ParamStore>,
    pub optimizer: Option<AdamWState>,
}

fn store_entries<'a>(prefix: &str, store: &'a ParamStore, out: &mut Vec<(String, &'a Tensor)>) {
    for (k, t) in &store.shared {
        out.push((format!("{prefix}shared/{k}"), t));
    }
    for (k, p) in &store.dual {
        out.push((format!("{prefix}clean/{k}"), &p.clean));
        out.push((format!("{prefix}adv/{k}"), &p.adv));
    }
    for (k, t) in &store.buffers {
        out.push((format!("{prefix}buffer/{k}"), t));
    }
    for (k, p) in &store.dual_buffers {
        out.push((format!("{prefix}buffer.clean/{k}"), &p.clean));
        out.push((format!("{prefix}buffer.adv/{k}"), &p.adv));
    }
}

fn key_name(key: &ParamKey) -> String {
    match key {
        ParamKey::Shared(n) => format!("shared/{n}"),
        ParamKey::Dual(n, BranchKey::Clean) => format!("clean/{n}"),
        ParamKey::Dual(n, BranchKey::Robust) => format!("adv/{n}"),
    }
}

fn parse_key(name: &str) -> Result<ParamKey> {
    let (kind, rest) = name.split_once('/').ok_or_else(|| Error::Format(format!("bad tensor name `{name}`")))?;
    Ok(match kind {
        "shared" => ParamKey::Shared(rest.into()),
        "clean" => ParamKey::Dual(rest.into(), BranchKey::Clean),
        "adv" => ParamKey::Dual(rest.into(), BranchKey::Robust),
        _ => bail!(Format, "bad tensor name `{}`", name),
    })
}

/// Serializes a checkpoint to bytes.
pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut meta = ckpt.meta.clone();
    meta.adapter = ckpt.store.adapter;
    let mut entries = Vec::new();
    store_entries("", &ckpt.store, &mut entries);
    if let Some(ema) = &ckpt.ema {
        store_entries("ema:", ema, &mut entries);
    }
    let opt_names: Vec<(String, &Tensor)> = match &ckpt.optimizer {
        Some(o) => o
            .m
            .iter()
            .map(|(k, t)| (format!("opt.m:{}", key_name(k)), t))
            .chain(o.v.iter().map(|(k, t)| (format!("opt.v:{}", key_name(k)), t)))
            .collect(),
        None => Vec::new(),
    };
    entries.extend(opt_names);
    let json = serde_json::to_vec(&OnDiskMeta { meta, optimizer_step: ckpt.optimizer.as_ref().map(|o| o.step) })?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct OnDiskMeta {
    meta: CheckpointMeta,
    optimizer_step: Option<u64>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.buf.len() - self.pos {
            bail!(Format, "checkpoint ends early at byte {}", self.pos);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).ok().filter(|&n| n <= self.buf.len()).ok_or_else(|| Error::Format(format!("implausible length {v}")))
    }
}

/// Parses and verifies a checkpoint from bytes.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 + 4 + 8 + 8 + 4 {
        bail!(Format, "checkpoint is truncated ({} bytes)", bytes.len());
    }
    if &bytes[..4] != MAGIC {
        bail!(Format, "bad magic, not a checkpoint");
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes"));
    if version != VERSION {
        bail!(Format, "unknown checkpoint version {}", version);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        bail!(Format, "CRC mismatch: stored {:08x}, computed {:08x}", stored, actual);
    }
    let mut r = Reader { buf: body, pos: 8 };
    let meta_len = r.len()?;
    let disk: OnDiskMeta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Format(format!("metadata: {e}")))?;
    let count = r.len()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.len()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.len()?;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.filter(|&n| n <= body.len() / 4).ok_or_else(|| Error::Format("implausible shape".into()))?;
        let data = r
            .take(numel * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            bail!(Format, "duplicate tensor `{}`", name);
        }
    }
    if r.pos != body.len() {
        bail!(Format, "{} trailing bytes after tensor table", body.len() - r.pos);
    }

    let adapter = disk.meta.adapter;
    let mut store = StoreBuilder::default();
    let mut ema = StoreBuilder::default();
    let mut opt = AdamWState::new();
    for (name, t) in tensors {
        if let Some(rest) = name.strip_prefix("opt.m:") {
            opt.m.insert(parse_key(rest)?, t);
        } else if let Some(rest) = name.strip_prefix("opt.v:") {
            opt.v.insert(parse_key(rest)?, t);
        } else if let Some(rest) = name.strip_prefix("ema:") {
            ema.insert(rest, t)?;
        } else {
            store.insert(&name, t)?;
        }
    }
    let store = store.finish(adapter)?;
    let ema = if ema.is_empty() {
        None
    } else {
        let ema = ema.finish(adapter)?;
        if !ema.same_layout(&store) {
            bail!(Format, "EMA tensors do not match the model tensors");
        }
        Some(ema)
    };
    let optimizer = disk.optimizer_step.map(|step| {
        opt.step = step;
        opt
    });
    Ok(Checkpoint { meta: disk.meta, store, ema, optimizer })
}

type Halves = BTreeMap<String, (Option<Tensor>, Option<Tensor>)>;

#[derive(Default)]
struct StoreBuilder {
    shared: BTreeMap<String, Tensor>,
    dual: Halves,
    buffers: BTreeMap<String, Tensor>,
    dual_buffers: Halves,
}

impl StoreBuilder {
    fn is_empty(&self) -> bool {
        self.shared.is_empty() && self.dual.is_empty() && self.buffers.is_empty() && self.dual_buffers.is_empty()
    }

    fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        let (kind, key) = name.split_once('/').ok_or_else(|| Error::Format(format!("bad tensor name `{name}`")))?;
        let key = key.to_string();
        match kind {
            "shared" => drop(self.shared.insert(key, t)),
            "clean" => self.dual.entry(key).or_default().0 = Some(t),
            "adv" => self.dual.entry(key).or_default().1 = Some(t),
            "buffer" => drop(self.buffers.insert(key, t)),
            "buffer.clean" => self.dual_buffers.entry(key).or_default().0 = Some(t),
            "buffer.adv" => self.dual_buffers.entry(key).or_default().1 = Some(t),
            _ => bail!(Format, "bad tensor name `{}`", name),
        }
        Ok(())
    }

    fn finish(self, adapter: AdapterSpec) -> Result<ParamStore> {
        fn pairs(h: Halves) -> Result<BTreeMap<String, DualPair>> {
            h.into_iter()
                .map(|(k, halves)| match halves {
                    (Some(clean), Some(adv)) => Ok((k, DualPair { clean, adv })),
                    _ => Err(Error::Format(format!("dual entry `{k}` is missing one branch"))),
                })
                .collect()
        }
        let mut store = ParamStore::new(adapter);
        store.shared = self.shared;
        store.dual = pairs(self.dual)?;
        store.buffers = self.buffers;
        store.dual_buffers = pairs(self.dual_buffers)?;
        store.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(store)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    crate::io::write_atomic(path, &encode(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

/// Rounds every tensor to 32-bit precision, the resolution checkpoints keep.
pub fn quantize(store: &ParamStore) -> ParamStore {
    store.zip_map(store, |a, _| a.map(|v| v as f32 as f64)).expect("same store")
}
