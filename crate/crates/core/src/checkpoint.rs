//! Binary checkpoint format.
//!
//! ```text
//! "OCSP" | u32 version | u32 meta_len | meta (UTF-8 TOML) | u32 n_tensors |
//! n_tensors × (u32 name_len | name | u32 ndim | ndim × u32 dim | f32 data)
//! ```
//!
//! All integers and floats are little-endian. The TOML block holds the model
//! and training configs plus the epoch, dev EER, Adam step count and the
//! run's config hash. Tensors are the network parameters (`enc.*`, `pool.*`,
//! `out.*`), the head directions (`head.w0`, `head.w1`) and the Adam moments
//! (`adam.m.<name>`, `adam.v.<name>`).
//!
//! Values are stored as f32. A snapshot is rounded to f32 when it is taken,
//! so saving, loading and saving again reproduces the same bytes.

use std::path::Path;

use ndarray::{Array1, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{EmbeddingNet, NetConfig, Tensor};
use crate::optim::AdamState;
use crate::trainer::{Model, TrainConfig};

const MAGIC: &[u8; 4] = b"OCSP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net_config: NetConfig,
    pub train_config: TrainConfig,
    pub model: Model,
    /// Completed epochs when the snapshot was taken.
    pub epoch: usize,
    pub dev_eer: f64,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct State {
    epoch: usize,
    dev_eer: f64,
    adam_t: u64,
    config_hash: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    model: NetConfig,
    train: TrainConfig,
    state: State,
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl Checkpoint {
    /// Copy of the current training state, rounded to f32 precision.
    pub fn snapshot(model: &Model, net_config: &NetConfig, train_config: &TrainConfig, epoch: usize, dev_eer: f64) -> Self {
        let mut model = model.clone();
        for t in model.net.params_mut().tensors_mut() {
            t.value.mapv_inplace(round_f32);
        }
        for w in model.head.tensors_mut() {
            w.mapv_inplace(round_f32);
        }
        for buf in model.adam.m.iter_mut().chain(model.adam.v.iter_mut()) {
            buf.iter_mut().for_each(|v| *v = round_f32(*v));
        }
        Self {
            net_config: net_config.clone(),
            train_config: train_config.clone(),
            model,
            epoch,
            dev_eer,
            config_hash: String::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            model: self.net_config.clone(),
            train: self.train_config.clone(),
            state: State {
                epoch: self.epoch,
                dev_eer: self.dev_eer,
                adam_t: self.model.adam.t,
                config_hash: self.config_hash.clone(),
            },
        };
        let meta = toml::to_string(&meta).map_err(|e| Error::Checkpoint(format!("config snapshot: {e}")))?;

        let mut blobs: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        let net_tensors = self.model.net.params().tensors();
        for t in net_tensors {
            blobs.push((t.name.clone(), t.value.shape().to_vec(), t.value.iter().copied().collect()));
        }
        for (name, w) in self.model.head.tensors() {
            blobs.push((name.to_string(), vec![w.len()], w.to_vec()));
        }
        for (prefix, moments) in [("adam.m.", &self.model.adam.m), ("adam.v.", &self.model.adam.v)] {
            for (t, buf) in net_tensors.iter().zip(moments) {
                blobs.push((format!("{prefix}{}", t.name), t.value.shape().to_vec(), buf.clone()));
            }
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, meta.len() as u32);
        out.extend_from_slice(meta.as_bytes());
        put_u32(&mut out, blobs.len() as u32);
        for (name, shape, data) in blobs {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, shape.len() as u32);
            for d in shape {
                put_u32(&mut out, d as u32);
            }
            for v in data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic (not a checkpoint file)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Checkpoint("config snapshot is not UTF-8".into()))?;
        let meta: Meta = toml::from_str(meta).map_err(|e| Error::Checkpoint(format!("config snapshot: {e}")))?;
        meta.model.validate()?;
        meta.train.validate()?;

        let n = r.u32()? as usize;
        let mut blobs: Vec<(String, ArrayD<f64>)> = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data: Vec<f64> =
                raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
            let value = ArrayD::from_shape_vec(IxDyn(&shape), data).expect("length checked");
            blobs.push((name, value));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let mut take = |name: &str| -> Result<ArrayD<f64>> {
            let idx = blobs
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            Ok(blobs.remove(idx).1)
        };
        // net tensor names come from a freshly built net with this config
        let names: Vec<String> = EmbeddingNet::new(&meta.model)?.params().tensors().iter().map(|t| t.name.clone()).collect();
        let mut tensors = Vec::with_capacity(names.len());
        for name in &names {
            tensors.push(Tensor { name: name.clone(), value: take(name)? });
        }
        let net = EmbeddingNet::with_tensors(&meta.model, tensors)?;

        let head_cfg = meta.train.head_config();
        let vec1 = |a: ArrayD<f64>, name: &str| -> Result<Array1<f64>> {
            a.into_dimensionality().map_err(|_| Error::Checkpoint(format!("{name} must be one-dimensional")))
        };
        let w0 = vec1(take("head.w0")?, "head.w0")?;
        let w1 = match head_cfg.kind {
            crate::loss::LossKind::OcSoftmax => None,
            _ => Some(vec1(take("head.w1")?, "head.w1")?),
        };
        if w0.len() != meta.model.embed_dim {
            return Err(Error::Checkpoint("head dimension does not match embed_dim".into()));
        }
        let head = crate::loss::LossHead::from_parts(&head_cfg, w0, w1)?;

        let mut adam = AdamState::new(&[], meta.train.adam_beta1, meta.train.adam_beta2, meta.train.adam_eps);
        adam.t = meta.state.adam_t;
        for (prefix, moments) in [("adam.m.", &mut adam.m), ("adam.v.", &mut adam.v)] {
            for (name, t) in names.iter().zip(net.params().tensors()) {
                let a = take(&format!("{prefix}{name}"))?;
                if a.shape() != t.value.shape() {
                    return Err(Error::Checkpoint(format!("{prefix}{name} has the wrong shape")));
                }
                moments.push(a.into_iter().collect());
            }
        }
        if let Some((extra, _)) = blobs.first() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }

        Ok(Self {
            net_config: meta.model,
            train_config: meta.train,
            model: Model { net, head, adam },
            epoch: meta.state.epoch,
            dev_eer: meta.state.dev_eer,
            config_hash: meta.state.config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
