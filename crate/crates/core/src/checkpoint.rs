//! Binary checkpoints: named parameter arrays, Adam moments, the epoch
//! counter and a config snapshot, all little-endian with a version header.
//! Loading restores values bitwise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::config::RunConfig;
use crate::error::{HgError, Result};
use crate::graph::Arr;
use crate::nn::ParamStore;

const MAGIC: &[u8; 4] = b"HGC1";
pub const VERSION: u32 = 1;

/// First and second Adam moment estimates, aligned with the parameter list
/// by index, plus the global step count.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<Arr>,
    pub v: Vec<Arr>,
    pub step: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub epoch: usize,
    pub config: RunConfig,
    pub params: Vec<(String, Arr)>,
    pub moments: Option<Moments>,
}

fn format_err(file: &Path, detail: impl Into<String>) -> HgError {
    HgError::Format { file: file.to_path_buf(), detail: detail.into() }
}

fn write_arr(out: &mut impl Write, a: &Arr) -> Result<()> {
    out.write_all(&[a.ndim() as u8])?;
    for &d in a.shape() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for &x in a.iter() {
        out.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

struct ArrReader<'f, R> {
    inp: R,
    file: &'f Path,
}

impl<R: Read> ArrReader<'_, R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inp
            .read_exact(&mut buf)
            .map_err(|e| format_err(self.file, format!("truncated: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn arr(&mut self) -> Result<Arr> {
        let rank = self.bytes(1)?[0];
        if rank > 8 {
            return Err(format_err(self.file, format!("implausible rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        let mut n = 1usize;
        for _ in 0..rank {
            let d = self.u32()? as usize;
            n = n
                .checked_mul(d)
                .ok_or_else(|| format_err(self.file, "dim overflow"))?;
            dims.push(d);
        }
        let raw = self.bytes(n * 4)?;
        let vals: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        ArrayD::from_shape_vec(IxDyn(&dims), vals)
            .map_err(|e| format_err(self.file, e.to_string()))
    }
}

/// Saves the full training state. `moments` is omitted for eval-only
/// exports; its arrays must line up with the store one-to-one.
pub fn save(
    path: &Path,
    store: &ParamStore,
    moments: Option<&Moments>,
    epoch: usize,
    cfg: &RunConfig,
) -> Result<()> {
    if let Some(mo) = moments {
        if mo.m.len() != store.len() || mo.v.len() != store.len() {
            return Err(HgError::Incompatible(format!(
                "moment count {}/{} does not match {} parameters",
                mo.m.len(),
                mo.v.len(),
                store.len()
            )));
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(epoch as u64).to_le_bytes())?;
    let cfg_text = cfg.to_toml();
    out.write_all(&(cfg_text.len() as u32).to_le_bytes())?;
    out.write_all(cfg_text.as_bytes())?;
    out.write_all(&[moments.is_some() as u8])?;
    out.write_all(&moments.map_or(0, |m| m.step).to_le_bytes())?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    for id in 0..store.len() {
        let name = store.name(id).as_bytes();
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name)?;
        write_arr(&mut out, store.value(id))?;
    }
    if let Some(mo) = moments {
        for id in 0..store.len() {
            write_arr(&mut out, &mo.m[id])?;
            write_arr(&mut out, &mo.v[id])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = ArrReader { inp: BufReader::new(File::open(path)?), file: path };
    if r.bytes(4)? != MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let epoch = r.u64()? as usize;
    let cfg_len = r.u32()? as usize;
    let cfg_text = String::from_utf8(r.bytes(cfg_len)?)
        .map_err(|e| format_err(path, e.to_string()))?;
    let config: RunConfig =
        toml::from_str(&cfg_text).map_err(|e| format_err(path, e.to_string()))?;
    let has_moments = r.bytes(1)?[0] != 0;
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(n)?)
            .map_err(|e| format_err(path, e.to_string()))?;
        let arr = r.arr()?;
        params.push((name, arr));
    }
    let moments = if has_moments {
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for _ in 0..count {
            m.push(r.arr()?);
            v.push(r.arr()?);
        }
        Some(Moments { m, v, step })
    } else {
        None
    };
    Ok(Checkpoint { epoch, config, params, moments })
}

impl Checkpoint {
    /// Copies saved values into `store`, matching parameters by name.
    /// Any missing, extra or reshaped parameter is an incompatibility.
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(HgError::Incompatible(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, arr) in &self.params {
            let id = store.id(name).ok_or_else(|| {
                HgError::Incompatible(format!("model has no parameter '{name}'"))
            })?;
            if store.value(id).shape() != arr.shape() {
                return Err(HgError::Incompatible(format!(
                    "parameter '{name}' has shape {:?} in the checkpoint but {:?} in the model",
                    arr.shape(),
                    store.value(id).shape()
                )));
            }
            store.value_mut(id).assign(arr);
        }
        Ok(())
    }
}
