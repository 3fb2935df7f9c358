//! Model checkpoints: binary container "AVC1" with the model config as text
//! followed by every named tensor as little-endian `f64`.

use std::fs;
use std::path::Path;

use echodepth_tensor::Tensor;

use crate::error::{Error, Result};
use crate::kv::{KvList, KvMap};
use crate::model::Model;

const MAGIC: &[u8; 4] = b"AVC1";

pub fn encode(model: &Model, extra: &KvList) -> Vec<u8> {
    let mut kv = model.config_kv();
    kv.extend(extra);
    let text = kv.to_text();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(text.len() as u64).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&(model.store.len() as u64).to_le_bytes());
    for (_, p) in model.store.iter() {
        buf.extend_from_slice(&(p.name.len() as u64).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.value.ndim() as u64).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

/// Writes through a temporary file and renames, so an interrupted save
/// leaves any previous checkpoint untouched.
pub fn save(model: &Model, extra: &KvList, path: &Path) -> Result<()> {
    write_atomic(path, &encode(model, extra))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<usize> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
    }
}

/// The decoded container: config metadata and named tensors.
pub struct Decoded {
    pub config: KvList,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Decoded> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "missing AVC1 magic"));
    }
    let mut c = Cursor { bytes, pos: 4, path };
    let text_len = c.u64()?;
    let text = std::str::from_utf8(c.take(text_len)?).map_err(|_| Error::format(path, "config text is not UTF-8"))?;
    let config = KvList::parse(text).map_err(|e| Error::format(path, e.to_string()))?;
    let count = c.u64()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = c.u64()?;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?
            .to_string();
        let ndim = c.u64()?;
        if ndim > 8 {
            return Err(Error::format(path, format!("{name}: rank {ndim} too large")));
        }
        let shape: Vec<usize> = (0..ndim).map(|_| c.u64()).collect::<Result<_>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::format(path, format!("{name}: implausible shape {shape:?}")))?;
        let data = c
            .take(n * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::format(path, e.to_string()))?;
        tensors.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    Ok(Decoded { config, tensors })
}

/// Rebuilds the model described in the checkpoint and loads its tensors.
/// Any unknown, missing or mis-shaped parameter is a format error.
/// Returns the model and the metadata keys it did not consume.
pub fn load_bytes(bytes: &[u8], path: &Path) -> Result<(Model, KvMap)> {
    let d = decode(bytes, path)?;
    let map = d.config.into_map();
    let mut model = Model::from_config_kv(&map).map_err(|e| Error::format(path, e.to_string()))?;
    model
        .store
        .load(d.tensors)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok((model, map))
}

pub fn load(path: &Path) -> Result<(Model, KvMap)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    load_bytes(&bytes, path)
}
