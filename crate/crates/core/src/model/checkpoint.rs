//! Binary checkpoint format.
//!
//! ```text
//! b"SPACT001"
//! u32 config_len, config JSON
//! u32 n_params
//! per parameter: u16 name_len, name, u8 ndim, u32 dims[ndim], f64 values (LE)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ModelConfig, ParamArray, ToyModel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SPACT001";

pub fn write_checkpoint<W: Write>(model: &ToyModel, mut w: W) -> std::io::Result<()> {
    let cfg = serde_json::to_vec(&model.config)?;
    w.write_all(MAGIC)?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, p) in &model.params {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[p.shape.len() as u8])?;
        for d in &p.shape {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in &p.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ToyModel> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let cfg_len = c.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(c.take(cfg_len, "config")?)
        .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let n = c.u32("parameter count")? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..n {
        let len = u16::from_le_bytes(c.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?
            .to_string();
        let ndim = c.take(1, "ndim")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u32("dims")? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = c.take(count * 8, &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if params.insert(name.clone(), ParamArray { shape, data }).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
    }
    if c.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            buf.len() - c.pos
        )));
    }
    ToyModel::from_parts(config, params)
}

pub fn save_checkpoint(model: &ToyModel, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(model, std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ToyModel> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(f))
}

const BUNDLED: &[u8] = include_bytes!("../../data/toy_model.bin");

/// The model trained on the bundled training split with default settings.
pub fn bundled_model() -> Result<ToyModel> {
    read_checkpoint(BUNDLED)
}
