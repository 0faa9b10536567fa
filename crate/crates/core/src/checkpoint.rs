//! Binary named-tensor container and model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DPCK" | u32 version | u32 entry count
//! per entry: u32 name length | name bytes (UTF-8) | u32 ndim | u64 dims...
//!            | u8 trainability (0 frozen, 1 all, 2 element mask) | [mask bytes]
//!            | f64 values (row-major)
//! ```
//!
//! Entries are written in id order, so identical stores produce identical files.
//! Model checkpoints pair a container with a JSON sidecar holding the model
//! description and the neuron ledger.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::growth::NeuronLedger;
use crate::layers::ModelGraph;
use crate::params::{ParamStore, TrainMask};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DPCK";
const VERSION: u32 = 1;

pub fn encode_store(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (id, t) in store.iter() {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match store.mask(id) {
            None => out.push(0),
            Some(TrainMask::All) => out.push(1),
            Some(TrainMask::Elements(bits)) => {
                out.push(2);
                out.extend(bits.iter().map(|&b| b as u8));
            }
        }
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.bad("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bad(&self, msg: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            msg: format!("{msg} (offset {})", self.pos),
        }
    }
}

/// Decodes a container; `path` is only used in error messages.
pub fn decode_store(buf: &[u8], path: &Path) -> Result<ParamStore> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(r.bad("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.bad(&format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| r.bad("entry name is not UTF-8"))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mask = match r.u8()? {
            0 => None,
            1 => Some(TrainMask::All),
            2 => Some(TrainMask::Elements(r.take(n)?.iter().map(|&b| b != 0).collect())),
            _ => return Err(r.bad("unknown trainability tag")),
        };
        let bytes = r.take(n.checked_mul(8).ok_or_else(|| r.bad("tensor too large"))?)?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, values).map_err(|e| r.bad(&e.to_string()))?;
        store.insert_with_mask(name, t, mask);
    }
    if r.pos != buf.len() {
        return Err(r.bad("trailing bytes"));
    }
    Ok(store)
}

/// Writes `bytes` to a temporary sibling file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_store(path: &Path, store: &ParamStore) -> Result<()> {
    write_atomic(path, &encode_store(store))
}

pub fn load_store(path: &Path) -> Result<ParamStore> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_store(&buf, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelGraph,
    pub ledger: NeuronLedger,
}

/// A model, its parameters and its ledger as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelGraph,
    pub params: ParamStore,
    pub ledger: NeuronLedger,
}

fn paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.dpck")), dir.join(format!("{name}.json")))
}

/// Writes `{dir}/{name}.dpck` and `{dir}/{name}.json`.
pub fn save_checkpoint(
    dir: &Path,
    name: &str,
    model: &ModelGraph,
    params: &ParamStore,
    ledger: &NeuronLedger,
) -> Result<()> {
    let (bin, meta) = paths(dir, name);
    let json = serde_json::to_vec_pretty(&CheckpointMeta {
        model: model.clone(),
        ledger: ledger.clone(),
    })?;
    write_atomic(&meta, &json)?;
    save_store(&bin, params)
}

pub fn load_checkpoint(dir: &Path, name: &str) -> Result<Checkpoint> {
    let (bin, meta) = paths(dir, name);
    let raw = fs::read(&meta).map_err(|e| Error::io(&meta, e))?;
    let m: CheckpointMeta = serde_json::from_slice(&raw).map_err(|e| Error::Format {
        path: meta.clone(),
        msg: e.to_string(),
    })?;
    let params = load_store(&bin)?;
    m.ledger.validate(&params)?;
    Ok(Checkpoint {
        model: m.model,
        params,
        ledger: m.ledger,
    })
}
