//! Binary checkpoints: `LCKP`, u32 version, u64 header length, a JSON header,
//! then every parameter tensor and (optionally) every momentum buffer as
//! little-endian f32 in store order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Sgd, TrainConfig};
use crate::error::{LightError, Result};
use crate::io::{read_bytes, write_bytes};
use crate::metrics::MetricsReport;
use crate::model::LightNet;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LCKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: TrainConfig,
    pub h_max: f64,
    pub epoch: usize,
    pub step: usize,
    pub metrics: Option<MetricsReport>,
    pub params: Vec<ParamMeta>,
    pub has_momentum: bool,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub store: ParamStore<f32>,
    pub momentum: Option<Vec<Tensor<f32>>>,
}

impl Checkpoint {
    pub fn new(
        config: &TrainConfig,
        h_max: f64,
        epoch: usize,
        step: usize,
        metrics: Option<MetricsReport>,
        store: &ParamStore<f32>,
        optim: Option<&Sgd>,
    ) -> Self {
        let params = store
            .entries()
            .iter()
            .map(|e| ParamMeta { name: e.name.clone(), shape: e.value.shape().to_vec(), trainable: e.trainable })
            .collect();
        Self {
            header: CheckpointHeader {
                config: config.clone(),
                h_max,
                epoch,
                step,
                metrics,
                params,
                has_momentum: optim.is_some(),
            },
            store: store.clone(),
            momentum: optim.map(|o| o.buffers.clone()),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| LightError::data(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.store.num_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for e in self.store.entries() {
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(m) = &self.momentum {
            for t in m {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(LightError::data("checkpoint: missing LCKP header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(LightError::data(format!("checkpoint: unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| LightError::data("checkpoint: truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| LightError::data(format!("checkpoint header: {e}")))?;
        let mut pos = 16 + hlen;
        let mut take = |shape: &[usize]| -> Result<Tensor<f32>> {
            let n: usize = shape.iter().product();
            let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| LightError::data("checkpoint: truncated tensor data"))?;
            pos += 4 * n;
            Tensor::from_vec(shape, raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
        };
        let mut store = ParamStore::new();
        for p in &header.params {
            let t = take(&p.shape)?;
            store.add(p.name.clone(), t, p.trainable);
        }
        let momentum = if header.has_momentum {
            let shapes: Vec<Vec<usize>> = header.params.iter().map(|p| if p.trainable { p.shape.clone() } else { vec![0] }).collect();
            Some(shapes.iter().map(|s| take(s)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        if pos != bytes.len() {
            return Err(LightError::data(format!("checkpoint: {} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self { header, store, momentum })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?)
    }

    /// Rebuilds the network and checks that every stored tensor fits it.
    pub fn model(&self) -> Result<(LightNet, ParamStore<f32>)> {
        let cfg = &self.header.config;
        let mut fresh = ParamStore::<f32>::new();
        let net = LightNet::new(&mut fresh, cfg.mode, &cfg.model, cfg.seed)?;
        if fresh.len() != self.store.len() {
            return Err(LightError::data(format!(
                "checkpoint has {} tensors, the configured network {}",
                self.store.len(),
                fresh.len()
            )));
        }
        for (a, b) in fresh.entries().iter().zip(self.store.entries()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(LightError::data(format!("checkpoint tensor `{}` does not match network tensor `{}`", b.name, a.name)));
            }
        }
        Ok((net, self.store.clone()))
    }
}
