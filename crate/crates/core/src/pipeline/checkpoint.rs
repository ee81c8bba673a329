//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TAPE"  u32 version  u32 header_len  header (JSON)
//! tensor_count × { u32 name_len  name  u32 rank  rank × u64 dim  f64 payload }
//! ```
//!
//! Tensor names are `theta/…`, `plm/…`, `phi/…` for parameters and
//! `adam/<store>/m/…`, `adam/<store>/v/…` for optimizer moments.

use crate::adam::{AdamConfig, AdamState};
use crate::arch::{init_backbone, init_plm, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::rng::{substream, RngState};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"TAPE";
pub const VERSION: u32 = 1;

/// Training stage a checkpoint was produced by.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Freshly initialized, never trained.
    Init,
    Pretrain,
    /// Stepwise fine-tuning, phase 1: the pseudo-GT network alone.
    FinetunePhi,
    /// Stepwise fine-tuning, phase 2: backbone and prior module, pseudo-GT frozen.
    FinetuneMain,
    FinetuneJoint,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Pretrain => "pretrain",
            Stage::FinetunePhi => "finetune_phi",
            Stage::FinetuneMain => "finetune_main",
            Stage::FinetuneJoint => "finetune_joint",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything needed to run or resume a model: backbone θ, prior module,
/// optional pseudo-GT backbone φ, optimizer state and the data stream position.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub stage: Stage,
    /// Iterations completed in `stage`.
    pub iteration: u64,
    /// Fine-tuning task, if any.
    pub task: Option<String>,
    pub theta: ParameterStore<f64>,
    pub plm: ParameterStore<f64>,
    pub phi: Option<ParameterStore<f64>>,
    /// Adam state keyed by store name (`theta`, `plm`, `phi`).
    pub optim: BTreeMap<String, AdamState<f64>>,
    pub rng: Option<RngState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    stage: Stage,
    iteration: u64,
    task: Option<String>,
    rng: Option<RngState>,
    optim: BTreeMap<String, OptimHeader>,
    has_phi: bool,
    tensor_count: u64,
}

impl Checkpoint {
    /// Fresh weights drawn from the `init/theta` and `init/plm` streams.
    pub fn init(model: &ModelConfig, seed: u64) -> Self {
        Self {
            model: model.clone(),
            stage: Stage::Init,
            iteration: 0,
            task: None,
            theta: init_backbone(model, &mut substream(seed, "init/theta")),
            plm: init_plm(model, &mut substream(seed, "init/plm")),
            phi: None,
            optim: BTreeMap::new(),
            rng: None,
        }
    }

    pub fn store(&self, name: &str) -> Option<&ParameterStore<f64>> {
        match name {
            "theta" => Some(&self.theta),
            "plm" => Some(&self.plm),
            "phi" => self.phi.as_ref(),
            _ => None,
        }
    }

    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for name in ["theta", "plm", "phi"] {
            if let Some(store) = self.store(name) {
                for (k, t) in store.iter() {
                    out.push((format!("{name}/{k}"), t.shape().to_vec(), t.data()));
                }
            }
        }
        for (store, state) in &self.optim {
            for (moment, map) in [("m", &state.m), ("v", &state.v)] {
                for (k, data) in map {
                    out.push((format!("adam/{store}/{moment}/{k}"), vec![data.len()], data.as_slice()));
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.tensors();
        let header = Header {
            model: self.model.clone(),
            stage: self.stage,
            iteration: self.iteration,
            task: self.task.clone(),
            rng: self.rng.clone(),
            optim: self
                .optim
                .iter()
                .map(|(k, s)| (k.clone(), OptimHeader { config: s.config, step: s.step }))
                .collect(),
            has_phi: self.phi.is_some(),
            tensor_count: tensors.len() as u64,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.theta.numel() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (name, dims, data) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.err_at(0, "bad magic, not a checkpoint file"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.err_at(4, format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let len = r.u32("header length")? as usize;
        let start = r.pos;
        let header: Header = serde_json::from_slice(r.take(len, "header")?)
            .map_err(|e| r.err_at(start, format!("malformed header: {e}")))?;

        let mut theta = ParameterStore::new();
        let mut plm = ParameterStore::new();
        let mut phi = header.has_phi.then(ParameterStore::new);
        let mut optim: BTreeMap<String, AdamState<f64>> = header
            .optim
            .iter()
            .map(|(k, o)| {
                let state = AdamState {
                    config: o.config,
                    step: o.step,
                    m: BTreeMap::new(),
                    v: BTreeMap::new(),
                };
                (k.clone(), state)
            })
            .collect();

        for _ in 0..header.tensor_count {
            let at = r.pos;
            let name_len = r.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| r.err_at(at, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32("tensor rank")? as usize;
            if rank > 8 {
                return Err(r.err_at(at, format!("tensor `{name}` has implausible rank {rank}")));
            }
            let dims = (0..rank)
                .map(|_| r.u64("tensor dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let Some(count) = count.filter(|c| c.checked_mul(8).is_some()) else {
                return Err(r.err_at(at, format!("tensor `{name}` is too large")));
            };
            let data: Vec<f64> = r
                .take(count * 8, "tensor payload")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let (store, rest) = name.split_once('/').ok_or_else(|| r.err_at(at, format!("bad tensor name `{name}`")))?;
            match (store, phi.as_mut()) {
                ("theta", _) => theta.insert(rest, Tensor::new(dims, data)?),
                ("plm", _) => plm.insert(rest, Tensor::new(dims, data)?),
                ("phi", Some(p)) => p.insert(rest, Tensor::new(dims, data)?),
                ("adam", _) => {
                    let mut parts = rest.splitn(3, '/');
                    let (Some(s), Some(moment), Some(key)) = (parts.next(), parts.next(), parts.next()) else {
                        return Err(r.err_at(at, format!("bad optimizer tensor name `{name}`")));
                    };
                    let state = optim
                        .get_mut(s)
                        .ok_or_else(|| r.err_at(at, format!("optimizer tensor for unknown store `{s}`")))?;
                    let map = match moment {
                        "m" => &mut state.m,
                        "v" => &mut state.v,
                        _ => return Err(r.err_at(at, format!("bad optimizer tensor name `{name}`"))),
                    };
                    map.insert(key.to_string(), data);
                }
                _ => return Err(r.err_at(at, format!("unexpected tensor `{name}`"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(r.err_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            model: header.model,
            stage: header.stage,
            iteration: header.iteration,
            task: header.task,
            theta,
            plm,
            phi,
            optim,
            rng: header.rng,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err_at(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.err_at(self.pos, format!("truncated while reading {what}")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
