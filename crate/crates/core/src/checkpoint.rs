//! Single-file checkpoints.
//!
//! ```text
//! "TINTCKPT"  u32 version  u64 meta_len  meta (TOML)  u64 n_records
//! n_records x { u8 kind  u32 name_len  name  TNSR record }
//! ```
//!
//! All integers little-endian. `kind` is 0 parameter, 1 buffer, 2 Adam first
//! moment, 3 Adam second moment. Records are written in name order within
//! each kind, so re-saving a loaded checkpoint reproduces the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::container;
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TintModel};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{AdamState, TrainState};

pub const MAGIC: [u8; 8] = *b"TINTCKPT";
pub const VERSION: u32 = 1;

/// Input normalization the model was trained with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub modalities: Vec<Modality>,
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: TintModel,
    pub normalization: Option<Normalization>,
    pub train_state: Option<TrainState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainMeta {
    next_epoch: u64,
    step: u64,
    adam_t: u64,
    best_val_rmse: Option<f64>,
    best_epoch: Option<u64>,
    rng_seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    model: ModelConfig,
    normalization: Option<Normalization>,
    train: Option<TrainMeta>,
}

const KIND_PARAM: u8 = 0;
const KIND_BUFFER: u8 = 1;
const KIND_ADAM_M: u8 = 2;
const KIND_ADAM_V: u8 = 3;

impl Checkpoint {
    pub fn new(model: TintModel) -> Self {
        Self {
            model,
            normalization: None,
            train_state: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            model: self.model.config().clone(),
            normalization: self.normalization.clone(),
            train: self.train_state.as_ref().map(|s| TrainMeta {
                next_epoch: s.next_epoch,
                step: s.step,
                adam_t: s.adam.t,
                best_val_rmse: s.best_val_rmse,
                best_epoch: s.best_epoch,
                rng_seed: s.rng_seed,
            }),
        };
        let text = toml::to_string(&meta).map_err(|e| Error::Corrupt(format!("cannot encode metadata: {e}")))?;
        let store = self.model.store();
        let mut records: Vec<(u8, &String, &Tensor)> = Vec::new();
        records.extend(store.params().iter().map(|(n, t)| (KIND_PARAM, n, t)));
        records.extend(store.buffers().iter().map(|(n, t)| (KIND_BUFFER, n, t)));
        if let Some(s) = &self.train_state {
            records.extend(s.adam.m.iter().map(|(n, t)| (KIND_ADAM_M, n, t)));
            records.extend(s.adam.v.iter().map(|(n, t)| (KIND_ADAM_V, n, t)));
        }

        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(records.len() as u64).to_le_bytes());
        for (kind, name, t) in records {
            out.push(kind);
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            container::encode_into(t, &mut out)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Corrupt("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Unsupported {
                what: "checkpoint version",
                value: version as u64,
            });
        }
        let meta_len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(meta_len)?).map_err(|_| Error::Corrupt("metadata is not UTF-8".into()))?;
        let meta: Meta = toml::from_str(text).map_err(|e| Error::Corrupt(format!("bad metadata: {e}")))?;
        let n = r.u64()?;
        let mut store = ParamStore::new();
        let mut adam_m = BTreeMap::new();
        let mut adam_v = BTreeMap::new();
        for _ in 0..n {
            let kind = r.take(1)?[0];
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let (t, used) = container::decode_prefix(&bytes[r.pos..]).map_err(|e| match e {
                Error::Corrupt(m) => Error::Corrupt(format!("tensor `{name}`: {m}")),
                other => other,
            })?;
            r.pos += used;
            let dup = match kind {
                KIND_PARAM => store.params().contains_key(&name) || {
                    store.insert_param(name.clone(), t);
                    false
                },
                KIND_BUFFER => store.buffers().contains_key(&name) || {
                    store.insert_buffer(name.clone(), t);
                    false
                },
                KIND_ADAM_M => adam_m.insert(name.clone(), t).is_some(),
                KIND_ADAM_V => adam_v.insert(name.clone(), t).is_some(),
                other => return Err(Error::Corrupt(format!("unknown record kind {other}"))),
            };
            if dup {
                return Err(Error::Corrupt(format!("duplicate tensor `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let model = TintModel::from_parts(meta.model, store)?;
        let train_state = match meta.train {
            Some(tm) => {
                let names: Vec<_> = model.store().params().keys().collect();
                for moments in [&adam_m, &adam_v] {
                    if !moments.is_empty() && moments.keys().collect::<Vec<_>>() != names {
                        return Err(Error::Corrupt("optimizer state does not match parameters".into()));
                    }
                }
                Some(TrainState {
                    next_epoch: tm.next_epoch,
                    step: tm.step,
                    best_val_rmse: tm.best_val_rmse,
                    best_epoch: tm.best_epoch,
                    rng_seed: tm.rng_seed,
                    adam: AdamState {
                        t: tm.adam_t,
                        m: adam_m,
                        v: adam_v,
                    },
                })
            }
            None if adam_m.is_empty() && adam_v.is_empty() => None,
            None => return Err(Error::Corrupt("optimizer tensors without training metadata".into())),
        };
        Ok(Self {
            model,
            normalization: meta.normalization,
            train_state,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
