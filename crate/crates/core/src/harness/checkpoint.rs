//! Binary checkpoint: `KONCKPT1`, a little-endian `u64` header length, a
//! JSON header, then little-endian tensor payloads at the listed offsets.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Dtype, RunConfig};
use super::model::Model;
use crate::error::{KonError, Result};
use crate::kgdata::Vocabulary;
use crate::ndops::Tensor;

const MAGIC: &[u8; 8] = b"KONCKPT1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    config: RunConfig,
    step: usize,
    rng: RngState,
    vocab: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub config: RunConfig,
    pub step: usize,
    pub rng: RngState,
    pub vocab: Vec<String>,
}

fn bad(msg: impl Into<String>) -> KonError {
    KonError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn capture(model: &Model, step: usize, rng: &ChaCha8Rng) -> Self {
        Checkpoint {
            tensors: model
                .store
                .iter()
                .map(|(_, n, t)| (n.to_string(), t.clone()))
                .collect(),
            config: model.config.clone(),
            step,
            rng: RngState::capture(rng),
            vocab: model.vocab.tokens().to_vec(),
        }
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Result<Vec<u8>> {
        let width = match dtype {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        };
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                dtype,
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel() * width;
        }
        let header = Header {
            tensors: entries,
            config: self.config.clone(),
            step: self.step,
            rng: self.rng.clone(),
            vocab: self.vocab.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for &x in t.data() {
                match dtype {
                    Dtype::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
                    Dtype::F64 => out.extend_from_slice(&x.to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing checkpoint magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..body]).map_err(|e| bad(e.to_string()))?;
        let payload = &bytes[body..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let width = match e.dtype {
                Dtype::F32 => 4,
                Dtype::F64 => 8,
            };
            let raw = payload
                .get(e.offset..e.offset + n * width)
                .ok_or_else(|| bad(format!("payload of {} is truncated", e.name)))?;
            let data: Vec<f64> = match e.dtype {
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        }
        Ok(Checkpoint {
            tensors,
            config: header.config,
            step: header.step,
            rng: header.rng,
            vocab: header.vocab,
        })
    }

    pub fn save(&self, path: &Path, dtype: Dtype) -> Result<()> {
        let bytes = self.to_bytes(dtype)?;
        let mut f = fs::File::create(path).map_err(|e| KonError::io(path, e))?;
        f.write_all(&bytes).map_err(|e| KonError::io(path, e))?;
        f.sync_all().map_err(|e| KonError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| KonError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model described by the stored config and loads the
    /// stored weights into it.
    pub fn restore(&self) -> Result<Model> {
        self.config.validate()?;
        let graph = self.config.dataset.load()?;
        let vocab = Vocabulary::from_tokens(self.vocab.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut model = Model::assemble(&self.config, graph, vocab, &mut rng)?;
        if model.store.len() != self.tensors.len() {
            return Err(bad(format!(
                "checkpoint has {} tensors but the configured model has {}",
                self.tensors.len(),
                model.store.len()
            )));
        }
        for (name, t) in &self.tensors {
            let id = model
                .store
                .id(name)
                .ok_or_else(|| bad(format!("unexpected tensor {name}")))?;
            if model.store.get(id).shape() != t.shape() {
                return Err(bad(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    model.store.get(id).shape()
                )));
            }
            model.store.assign(name, t.clone())?;
        }
        Ok(model)
    }
}
