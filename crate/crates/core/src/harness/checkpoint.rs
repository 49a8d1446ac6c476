//! Checkpoint files: `STTSCKPT`, a `u32` version, then named tensors until
//! end of file. A JSON sidecar records the model and selection config.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, SelectionConfig};
use crate::error::{Error, Result};
use crate::model::ToyVit;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STTSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Contents of the `.json` sidecar next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub model: ModelConfig,
    pub selection: SelectionConfig,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_params(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * store.total_values());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let u32_of =
        |v: usize| u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit 32 bits")));
    for (name, t) in store.iter() {
        out.extend_from_slice(&u32_of(name.len())?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_of(t.ndim())?.to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&u32_of(e)?.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamStore> {
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(Error::Format(format!("checkpoint truncated at byte {pos}")));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not an STTSCKPT checkpoint".into()));
    }
    let read_u32 = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
    let version = read_u32(take(4)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mut store = ParamStore::new();
    while let Ok(len) = take(4) {
        let len = read_u32(len) as usize;
        let name = std::str::from_utf8(take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = read_u32(take(4)?) as usize;
        let shape: Vec<usize> = (0..ndim)
            .map(|_| take(4).map(|b| read_u32(b) as usize))
            .collect::<Result<_>>()?;
        let count: usize = shape.iter().product();
        let data = take(4 * count)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        store.add(name, Tensor::new(shape, data)?)?;
    }
    if pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - pos
        )));
    }
    Ok(store)
}

pub fn save_checkpoint(path: &Path, model: &ToyVit) -> Result<()> {
    fs::write(path, encode_params(model.params())?).map_err(|e| Error::io(path, e))?;
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        model: model.config().clone(),
        selection: *model.selection(),
    };
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ToyVit> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", side.display())))?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::Version(format!(
            "checkpoint sidecar version {}, expected {CHECKPOINT_VERSION}",
            meta.version
        )));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let store = decode_params(&bytes)?;
    let mut model = ToyVit::new(meta.model, meta.selection, 0)?;
    model.load_params(store)?;
    Ok(model)
}
