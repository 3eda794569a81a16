//! Binary model checkpoints.
//!
//! Layout (little-endian): magic `TRIVIT01`, u32 header length, header text
//! (`key=value` lines: model geometry and `dtype`), u32 tensor count, then
//! per tensor: u32 name length, name, u32 ndim, u32 dims, raw values.

use std::path::Path;

use trilevel_tensor::{Float, Tensor};

use crate::config::ViTConfig;
use crate::error::{CoreError, Result};
use crate::model::ViT;

pub const MAGIC: &[u8; 8] = b"TRIVIT01";

pub fn encode<F: Float>(model: &ViT<F>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let header = format!("{}dtype={}\n", model.config().to_kv_text(), F::NAME);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    let entries = model.params().entries();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        let shape = e.tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in e.tensor.data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn save<F: Float>(model: &ViT<F>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model))?;
    Ok(())
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> CoreError {
        CoreError::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("needs {n} more bytes, file ends")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn text(&mut self, n: usize) -> Result<String> {
        let at = self.pos;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| CoreError::Format {
            path: self.path.to_path_buf(),
            offset: at as u64,
            msg: "header is not UTF-8".into(),
        })
    }
}

/// Model geometry and dtype tag stored in a checkpoint.
pub fn read_header(path: &Path) -> Result<(ViTConfig, String)> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    header(&mut r)
}

fn header(r: &mut Reader<'_>) -> Result<(ViTConfig, String)> {
    if r.take(MAGIC.len())? != MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic"));
    }
    let n = r.u32()?;
    let text = r.text(n)?;
    let (cfg, extra) = ViTConfig::from_kv_text(&text)?;
    let dtype = extra
        .into_iter()
        .find(|(k, _)| k == "dtype")
        .map(|(_, v)| v)
        .ok_or_else(|| r.err("header has no dtype"))?;
    Ok((cfg, dtype))
}

pub fn decode<F: Float>(path: &Path, bytes: &[u8]) -> Result<ViT<F>> {
    let mut r = Reader { path, bytes, pos: 0 };
    let (cfg, dtype) = header(&mut r)?;
    if dtype != F::NAME {
        return Err(CoreError::Incompatible(format!(
            "checkpoint holds {dtype} weights, {} requested",
            F::NAME
        )));
    }
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()?;
        let name = r.text(n)?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len * F::BYTES)?;
        let data: Vec<F> = raw.chunks_exact(F::BYTES).map(F::read_le).collect();
        let t = Tensor::new(shape, data).map_err(|e| r.err(e.to_string()))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after last tensor"));
    }
    ViT::from_named(&cfg, tensors)
}

pub fn load<F: Float>(path: &Path) -> Result<ViT<F>> {
    let bytes = std::fs::read(path)?;
    decode(path, &bytes)
}

/// Loads and checks the geometry against `expected`.
pub fn load_for<F: Float>(path: &Path, expected: &ViTConfig) -> Result<ViT<F>> {
    let model = load::<F>(path)?;
    if model.config() != expected {
        return Err(CoreError::Incompatible(format!(
            "checkpoint geometry {:?} differs from configured {:?}",
            model.config(),
            expected
        )));
    }
    Ok(model)
}
