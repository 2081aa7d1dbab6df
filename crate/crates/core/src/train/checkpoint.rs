//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `FUSIONCK`, a little-endian `u32` version, a
//! little-endian `u64` manifest length, the UTF-8 JSON manifest, then every
//! array as raw little-endian `f32` in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EpochRecord;
use crate::error::{Error, Result};
use crate::fusion::{FusionModel, FusionModelConfig};
use crate::rng::RngState;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FUSIONCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: usize,
    /// Length in bytes.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    model: FusionModelConfig,
    epoch: usize,
    rng: RngState,
    history: Vec<EpochRecord>,
    arrays: Vec<ArrayEntry>,
}

/// A decoded checkpoint: configuration, training metadata and every named
/// array (parameters and running statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: FusionModelConfig,
    pub epoch: usize,
    pub rng: RngState,
    pub history: Vec<EpochRecord>,
    pub arrays: Vec<(String, Tensor<f32>)>,
}

fn ck_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode_checkpoint(model: &FusionModel<f32>, epoch: usize, rng: RngState, history: &[EpochRecord]) -> Result<Vec<u8>> {
    let mut arrays = Vec::new();
    let mut offset = 0;
    for (_, p) in model.store.iter() {
        let len = p.tensor.numel() * 4;
        arrays.push(ArrayEntry { name: p.name.clone(), shape: p.tensor.shape().to_vec(), offset, len });
        offset += len;
    }
    let manifest = Manifest { model: model.config.clone(), epoch, rng, history: history.to_vec(), arrays };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(20 + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in model.store.iter() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(ck_err("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(ck_err(format!("unsupported checkpoint version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if mlen > body.len() {
        return Err(ck_err("manifest length exceeds file size"));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..mlen]).map_err(|e| ck_err(format!("invalid manifest: {e}")))?;
    let blob = &body[mlen..];
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for a in &manifest.arrays {
        let numel: usize = a.shape.iter().product();
        if a.len != numel * 4 {
            return Err(ck_err(format!("array {} declares {} bytes for shape {:?}", a.name, a.len, a.shape)));
        }
        let raw = blob
            .get(a.offset..a.offset + a.len)
            .ok_or_else(|| ck_err(format!("array {} extends past the end of the file", a.name)))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        arrays.push((a.name.clone(), Tensor::new(&a.shape, data)?));
    }
    Ok(Checkpoint { model: manifest.model, epoch: manifest.epoch, rng: manifest.rng, history: manifest.history, arrays })
}

pub fn save_checkpoint(
    path: &Path,
    model: &FusionModel<f32>,
    epoch: usize,
    rng: RngState,
    history: &[EpochRecord],
) -> Result<()> {
    let bytes = encode_checkpoint(model, epoch, rng, history)?;
    std::fs::write(path, bytes).map_err(|e| Error::Path { path: path.to_path_buf(), reason: e.to_string() })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::Path { path: path.to_path_buf(), reason: e.to_string() })?;
    decode_checkpoint(&bytes)
}

impl Checkpoint {
    fn find(&self, name: &str) -> Option<&Tensor<f32>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every array of `model` whose name starts with `prefix` (all of
    /// them for an empty prefix) from this checkpoint. Shapes are checked for
    /// every array before anything is written, so a failed load leaves the
    /// model untouched.
    pub fn load_into(&self, model: &mut FusionModel<f32>, prefix: &str) -> Result<usize> {
        let mut plan = Vec::new();
        for (id, p) in model.store.iter() {
            if !p.name.starts_with(prefix) {
                continue;
            }
            let t = self.find(&p.name).ok_or_else(|| ck_err(format!("array {} missing from checkpoint", p.name)))?;
            if t.shape() != p.tensor.shape() {
                return Err(ck_err(format!(
                    "array {} has shape {:?} in the checkpoint but {:?} in the model",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            plan.push((id, t));
        }
        if prefix.is_empty() {
            if let Some((name, _)) = self.arrays.iter().find(|(n, _)| model.store.find(n).is_none()) {
                return Err(ck_err(format!("checkpoint array {name} does not belong to the model")));
            }
        }
        let n = plan.len();
        for (id, t) in plan {
            model.store.tensor_mut(id).data_mut().copy_from_slice(t.data());
        }
        Ok(n)
    }

    /// Rebuilds the model described by the manifest and loads every array.
    pub fn to_model(&self) -> Result<FusionModel<f32>> {
        let mut model = FusionModel::build(&self.model, &mut RngState::new(0))?;
        self.load_into(&mut model, "")?;
        Ok(model)
    }
}
