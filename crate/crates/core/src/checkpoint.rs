//! Binary model checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "WKGC"  u32 version
//! u32 config_len, config JSON {"tag": "wikg" | "baseline", "config": {...}}
//! u32 tensor_count
//! per tensor: u32 name_len, name UTF-8, u8 dtype (0 = f32, 1 = f64),
//!             u32 rank, rank × u32 dims, raw element bytes
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::real::{DType, Real};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WKGC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ConfigBlock {
    tag: String,
    config: ModelConfig,
}

pub fn encode<T: Real>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let block = ConfigBlock {
        tag: if model.config.arch.is_graph() {
            "wikg".into()
        } else {
            "baseline".into()
        },
        config: model.config.clone(),
    };
    let cfg = serde_json::to_vec(&block)?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

/// A checkpoint decoded at whichever precision it was written in.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadedModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

impl LoadedModel {
    pub fn config(&self) -> &ModelConfig {
        match self {
            LoadedModel::F32(m) => &m.config,
            LoadedModel::F64(m) => &m.config,
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            LoadedModel::F32(_) => DType::F32,
            LoadedModel::F64(_) => DType::F64,
        }
    }
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated: needed {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn read_tensors<T: Real>(cur: &mut Cursor<'_>, count: usize, first_dtype: DType) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    for i in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| cur.fail("tensor name is not UTF-8"))?
            .to_owned();
        let dtype = DType::from_tag(cur.take(1)?[0]).ok_or_else(|| cur.fail("unknown dtype"))?;
        if dtype != first_dtype {
            return Err(cur.fail(format!("tensor {i} mixes precisions")));
        }
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * dtype.size())?;
        let data = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
        store.insert(name, Tensor::new(&shape, data)?)?;
    }
    Ok(store)
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<LoadedModel> {
    let mut cur = Cursor { path, bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        cur.pos = 0;
        return Err(cur.fail("bad checkpoint magic"));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(cur.fail(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = cur.u32()? as usize;
    let block: ConfigBlock = serde_json::from_slice(cur.take(cfg_len)?)?;
    let expected_tag = if block.config.arch.is_graph() { "wikg" } else { "baseline" };
    if block.tag != expected_tag {
        return Err(cur.fail(format!("config tag {} does not match model", block.tag)));
    }
    let count = cur.u32()? as usize;
    // Peek the first dtype to pick the precision.
    let dtype = if count == 0 {
        DType::F32
    } else {
        let save = cur.pos;
        let len = cur.u32()? as usize;
        cur.take(len)?;
        let d = DType::from_tag(cur.take(1)?[0]).ok_or_else(|| cur.fail("unknown dtype"))?;
        cur.pos = save;
        d
    };
    let loaded = match dtype {
        DType::F32 => LoadedModel::F32(Model {
            config: block.config,
            params: read_tensors(&mut cur, count, dtype)?,
        }),
        DType::F64 => LoadedModel::F64(Model {
            config: block.config,
            params: read_tensors(&mut cur, count, dtype)?,
        }),
    };
    if cur.pos != bytes.len() {
        return Err(cur.fail("trailing bytes after last tensor"));
    }
    Ok(loaded)
}

pub fn save<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<LoadedModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}
