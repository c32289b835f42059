//! Single-file training state, little-endian throughout:
//!
//! ```text
//! "MAFCKPT1"
//! [u8; 32]  config hash
//! u64       completed steps
//! u64       seed (per-step random streams derive from seed and step)
//! u64       optimizer update count
//! u32       tensor count
//! per tensor:
//!   u32 name length, name bytes (UTF-8)
//!   u32 rank, u64 per dimension
//!   f64 values, f64 first moment, f64 second moment
//! ```

use std::fs;
use std::path::Path;

use mafnet_core::model::MafNetParams;
use mafnet_core::optim::AdamW;
use mafnet_core::params::ParamSet;
use mafnet_core::train::Trainer;
use mafnet_core::Tensor;

use crate::config::RunConfig;
use crate::error::{config_err, Error, Result};

pub const MAGIC: &[u8; 8] = b"MAFCKPT1";

pub fn encode(trainer: &Trainer, hash: &[u8; 32]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(hash);
    out.extend_from_slice(&(trainer.step as u64).to_le_bytes());
    out.extend_from_slice(&trainer.cfg.seed.to_le_bytes());
    out.extend_from_slice(&trainer.opt.t.to_le_bytes());
    let names = MafNetParams::names();
    out.extend_from_slice(&(names.len() as u32).to_le_bytes());
    let tensors = trainer.params.tensors();
    for (i, name) in names.iter().enumerate() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let t = tensors[i];
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for src in [t, &trainer.opt.m[i], &trainer.opt.v[i]] {
            for v in src.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                field,
                msg: format!("truncated: need {n} bytes, have {}", self.bytes.len()),
            });
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, field: &'static str) -> Result<Vec<f64>> {
        let raw = self.take(8 * n, field)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn bad(&self, field: &'static str, msg: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            field,
            msg,
        }
    }
}

/// Restore a trainer for `cfg`; refuses state written under another config.
pub fn decode(bytes: &[u8], cfg: &RunConfig, path: &Path) -> Result<Trainer> {
    let mut r = Reader { bytes, path };
    if r.take(8, "magic")? != MAGIC {
        return Err(r.bad("magic", "not a MAFCKPT1 checkpoint".into()));
    }
    if r.take(32, "config hash")? != cfg.hash() {
        return Err(config_err!(
            "{}: checkpoint was written under a different configuration",
            path.display()
        ));
    }
    let step = r.u64("step")? as usize;
    let seed = r.u64("seed")?;
    if seed != cfg.seed {
        return Err(r.bad("seed", format!("stored seed {seed} differs from {}", cfg.seed)));
    }
    let t = r.u64("optimizer step")?;
    let mut trainer = Trainer::new(cfg.train_config())?;
    let names = MafNetParams::names();
    let count = r.u32("tensor count")? as usize;
    if count != names.len() {
        return Err(r.bad("tensor count", format!("expected {}, found {count}", names.len())));
    }
    let mut moments = (Vec::with_capacity(count), Vec::with_capacity(count));
    for (i, name) in names.iter().enumerate() {
        let len = r.u32("name length")? as usize;
        let stored = r.take(len, "name")?;
        if stored != name.as_bytes() {
            return Err(r.bad("name", format!("expected {name}, found {}", String::from_utf8_lossy(stored))));
        }
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u64("shape").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let expect = trainer.params.tensors()[i].shape().to_vec();
        if shape != expect {
            return Err(r.bad("shape", format!("{name}: expected {expect:?}, found {shape:?}")));
        }
        let n: usize = shape.iter().product();
        *trainer.params.tensors_mut()[i] = Tensor::new(&shape, r.f64s(n, "values")?)?;
        moments.0.push(Tensor::new(&shape, r.f64s(n, "first moment")?)?);
        moments.1.push(Tensor::new(&shape, r.f64s(n, "second moment")?)?);
    }
    if !r.bytes.is_empty() {
        return Err(r.bad("trailer", format!("{} unexpected trailing bytes", r.bytes.len())));
    }
    trainer.step = step;
    trainer.opt = AdamW {
        t,
        m: moments.0,
        v: moments.1,
        ..trainer.opt
    };
    Ok(trainer)
}

pub fn save(trainer: &Trainer, cfg: &RunConfig, path: &Path) -> Result<()> {
    fs::write(path, encode(trainer, &cfg.hash())).map_err(|e| Error::io(path, e))
}

pub fn load(cfg: &RunConfig, path: &Path) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, cfg, path)
}
