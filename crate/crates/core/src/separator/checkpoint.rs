use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::SelgModel;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SELGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint: configuration, free-form metadata and the parameters.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: serde_json::Value,
    pub store: ParamStore,
}

impl Checkpoint {
    /// Rebuilds the model on the checkpoint's parameters.
    pub fn model(&mut self) -> Result<SelgModel> {
        SelgModel::new(self.config.clone(), &mut self.store)
    }
}

/// Writes every parameter of `store` as little-endian f32 after a JSON header.
pub fn save_checkpoint(path: &Path, config: &ModelConfig, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let mut tensors = Vec::new();
    let mut data: Vec<f32> = Vec::new();
    for (name, var) in store.named_vars() {
        let values: Vec<f32> = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        tensors.push(TensorEntry { name: name.to_string(), shape: var.dims().to_vec(), offset: data.len() });
        data.extend_from_slice(&values);
    }
    let header = serde_json::to_vec(&Header { config: config.clone(), meta, tensors })?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(CHECKPOINT_MAGIC)?;
    write(&CHECKPOINT_VERSION.to_le_bytes())?;
    write(&(header.len() as u64).to_le_bytes())?;
    write(&header)?;
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in &data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write(&bytes)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint into a fresh store of `dtype`.
pub fn load_checkpoint(path: &Path, dtype: DType) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = 20usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::format(path, "truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[20..body]).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    header.config.validate()?;
    let payload = &bytes[body..];
    if payload.len() % 4 != 0 {
        return Err(Error::format(path, "payload is not a whole number of f32 values"));
    }
    let floats: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    let mut store = ParamStore::new(dtype, 0);
    for entry in &header.tensors {
        let count: usize = entry.shape.iter().product();
        let end = entry.offset + count;
        if end > floats.len() {
            return Err(Error::format(path, format!("tensor {} runs past the end of the file", entry.name)));
        }
        let t = Tensor::from_slice(&floats[entry.offset..end], entry.shape.as_slice(), &Device::Cpu)?;
        store.set(&entry.name, &t)?;
    }
    let expected = {
        let mut probe = ParamStore::new(dtype, 0);
        SelgModel::new(header.config.clone(), &mut probe)?;
        probe
    };
    for (name, var) in expected.named_vars() {
        match store.var(name) {
            Some(v) if v.dims() == var.dims() => {}
            Some(v) => {
                return Err(Error::format(
                    path,
                    format!("parameter {name} has shape {:?}, config implies {:?}", v.dims(), var.dims()),
                ))
            }
            None => return Err(Error::format(path, format!("parameter {name} missing"))),
        }
    }
    Ok(Checkpoint { config: header.config, meta: header.meta, store })
}
