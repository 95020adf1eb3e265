//! Binary parameter container.
//!
//! Layout, all integers little-endian:
//! `b"TRJGCKPT"`, u32 version, u32 config length, config JSON, u32 array
//! count, then per array: u32 name length, name, u32 rows, u32 cols,
//! rows·cols f64 values.

use std::path::Path;

use super::params::init_params;
use super::tape::Mat;
use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::sampling::rng_from_seed;

const MAGIC: &[u8; 8] = b"TRJGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * model.params().n_scalars() + 4096);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config()).expect("config serialises");
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    let p = model.params();
    out.extend_from_slice(&(p.len() as u32).to_le_bytes());
    for (name, v) in p.names().iter().zip(p.values()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(v.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(v.ncols() as u32).to_le_bytes());
        for x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("unexpected end of checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub(crate) fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let len = r.u32()? as usize;
    let at = r.pos;
    let cfg: ModelConfig = serde_json::from_slice(r.take(len)?).map_err(|e| Error::Parse {
        offset: at as u64,
        message: format!("config: {e}"),
    })?;
    cfg.validate()?;
    let (mut params, layout) = init_params(&cfg, &mut rng_from_seed(0));
    let count = r.u32()? as usize;
    if count != params.len() {
        return Err(r.err(format!("{count} arrays, config implies {}", params.len())));
    }
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| r.err("array name is not UTF-8"))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let idx = params.index_of(&name).ok_or_else(|| r.err(format!("unknown array {name:?}")))?;
        if params.values()[idx].dim() != (rows, cols) {
            return Err(r.err(format!("array {name:?} has shape {rows}x{cols}, expected {:?}", params.values()[idx].dim())));
        }
        let data = r.take(rows * cols * 8)?;
        let vals: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.values_mut()[idx] = Mat::from_shape_vec((rows, cols), vals).expect("shape checked");
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after last array"));
    }
    Ok(Model { cfg, params, layout })
}

pub(crate) fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub(crate) fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
