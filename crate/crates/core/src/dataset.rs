//! Binary dataset serialization.
//!
//! A shard is `magic "HGN1" | version u32 | count u32` followed by `count`
//! samples. Each sample is a fixed sequence of fields, each encoded as
//! `dtype u8 | rank u8 | dims u32 x rank | payload`. dtype 0 is f32, dtype 1
//! is u8. All integers and floats are little-endian. A dataset directory
//! holds numbered shards plus an `index.txt` listing them in order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, ArrayD, IxDyn};

use crate::error::{HgError, Result};
use crate::scenegen::{AgentState, AgentType, SceneSample};

const MAGIC: &[u8; 4] = b"HGN1";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

fn format_err(file: &Path, detail: impl Into<String>) -> HgError {
    HgError::Format { file: file.to_path_buf(), detail: detail.into() }
}

struct ShardWriter<W: Write> {
    out: W,
}

impl<W: Write> ShardWriter<W> {
    fn u32(&mut self, v: u32) -> Result<()> {
        self.out.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    fn f32_field(&mut self, dims: &[usize], data: impl Iterator<Item = f32>) -> Result<()> {
        self.out.write_all(&[DTYPE_F32, dims.len() as u8])?;
        let mut n = 1usize;
        for &d in dims {
            self.u32(d as u32)?;
            n *= d;
        }
        let mut count = 0usize;
        for v in data {
            self.out.write_all(&v.to_le_bytes())?;
            count += 1;
        }
        assert_eq!(count, n, "field payload does not match dims");
        Ok(())
    }

    fn u8_field(&mut self, dims: &[usize], data: impl Iterator<Item = u8>) -> Result<()> {
        self.out.write_all(&[DTYPE_U8, dims.len() as u8])?;
        let mut n = 1usize;
        for &d in dims {
            self.u32(d as u32)?;
            n *= d;
        }
        let bytes: Vec<u8> = data.collect();
        assert_eq!(bytes.len(), n, "field payload does not match dims");
        self.out.write_all(&bytes)?;
        Ok(())
    }
}

fn agent_row(a: &AgentState) -> [f32; 9] {
    [
        a.x,
        a.y,
        a.vx,
        a.vy,
        a.heading,
        a.length,
        a.width,
        a.typ.code() as f32,
        if a.valid { 1.0 } else { 0.0 },
    ]
}

fn agent_from_row(file: &Path, row: &[f32]) -> Result<AgentState> {
    let typ = AgentType::from_code(row[7] as u8)
        .ok_or_else(|| format_err(file, format!("unknown agent type code {}", row[7])))?;
    Ok(AgentState {
        x: row[0],
        y: row[1],
        vx: row[2],
        vy: row[3],
        heading: row[4],
        length: row[5],
        width: row[6],
        typ,
        valid: row[8] != 0.0,
    })
}

fn write_sample<W: Write>(w: &mut ShardWriter<W>, s: &SceneSample) -> Result<()> {
    let n_a = s.agent_histories.len();
    let t_h1 = s.agent_histories.first().map_or(0, |h| h.len());
    w.f32_field(
        &[n_a, t_h1, 9],
        s.agent_histories
            .iter()
            .flat_map(|hist| hist.iter().flat_map(|a| agent_row(a))),
    )?;
    let n_p = s.map_polylines.len();
    let n_w = s.map_polylines.first().map_or(0, |l| l.len());
    w.f32_field(
        &[n_p, n_w, 3],
        s.map_polylines
            .iter()
            .flat_map(|lane| lane.iter().flat_map(|p| [p[0], p[1], 1.0])),
    )?;
    w.f32_field(s.hist_occupancy.shape(), s.hist_occupancy.iter().copied())?;
    w.f32_field(s.hist_backward_flow.shape(), s.hist_backward_flow.iter().copied())?;
    w.f32_field(s.map_raster.shape(), s.map_raster.iter().copied())?;
    w.u8_field(s.gt_observed.shape(), s.gt_observed.iter().map(|&v| v as u8))?;
    w.u8_field(s.gt_occluded.shape(), s.gt_occluded.iter().map(|&v| v as u8))?;
    w.f32_field(s.gt_flow.shape(), s.gt_flow.iter().copied())?;
    w.u8_field(&[], std::iter::once(s.ego_index as u8))?;
    Ok(())
}

struct ShardReader<'f, R: Read> {
    inp: R,
    file: &'f Path,
}

impl<'f, R: Read> ShardReader<'f, R> {
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

    fn field(&mut self, expect_dtype: u8) -> Result<(Vec<usize>, Vec<u8>)> {
        let head = self.bytes(2)?;
        if head[0] != expect_dtype {
            return Err(format_err(
                self.file,
                format!("field dtype {} where {} expected", head[0], expect_dtype),
            ));
        }
        if head[1] > 8 {
            return Err(format_err(self.file, format!("implausible rank {}", head[1])));
        }
        let mut dims = Vec::with_capacity(head[1] as usize);
        let mut n = 1usize;
        for _ in 0..head[1] {
            let d = self.u32()? as usize;
            n = n
                .checked_mul(d)
                .ok_or_else(|| format_err(self.file, "dim overflow"))?;
            dims.push(d);
        }
        let elem = if expect_dtype == DTYPE_F32 { 4 } else { 1 };
        Ok((dims, self.bytes(n * elem)?))
    }

    fn f32_field(&mut self) -> Result<(Vec<usize>, Vec<f32>)> {
        let (dims, bytes) = self.field(DTYPE_F32)?;
        let vals = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((dims, vals))
    }

    fn u8_field(&mut self) -> Result<(Vec<usize>, Vec<u8>)> {
        self.field(DTYPE_U8)
    }
}

fn arr3(file: &Path, dims: &[usize], vals: Vec<f32>) -> Result<Array3<f32>> {
    if dims.len() != 3 {
        return Err(format_err(file, format!("rank {} where 3 expected", dims.len())));
    }
    ArrayD::from_shape_vec(IxDyn(dims), vals)
        .map_err(|e| format_err(file, e.to_string()))?
        .into_dimensionality()
        .map_err(|e| format_err(file, e.to_string()))
}

fn arr4(file: &Path, dims: &[usize], vals: Vec<f32>) -> Result<Array4<f32>> {
    if dims.len() != 4 {
        return Err(format_err(file, format!("rank {} where 4 expected", dims.len())));
    }
    ArrayD::from_shape_vec(IxDyn(dims), vals)
        .map_err(|e| format_err(file, e.to_string()))?
        .into_dimensionality()
        .map_err(|e| format_err(file, e.to_string()))
}

fn read_sample<R: Read>(r: &mut ShardReader<R>) -> Result<SceneSample> {
    let file = r.file.to_path_buf();
    let (hd, hv) = r.f32_field()?;
    if hd.len() != 3 || hd[2] != 9 {
        return Err(format_err(&file, "agent history field must be [N_A, T_h+1, 9]"));
    }
    let mut agent_histories = Vec::with_capacity(hd[0]);
    for i in 0..hd[0] {
        let mut hist = Vec::with_capacity(hd[1]);
        for j in 0..hd[1] {
            let at = (i * hd[1] + j) * 9;
            hist.push(agent_from_row(&file, &hv[at..at + 9])?);
        }
        agent_histories.push(hist);
    }
    let (pd, pv) = r.f32_field()?;
    if pd.len() != 3 || pd[2] != 3 {
        return Err(format_err(&file, "polyline field must be [N_P, W, 3]"));
    }
    let mut map_polylines = Vec::with_capacity(pd[0]);
    for i in 0..pd[0] {
        let mut lane = Vec::with_capacity(pd[1]);
        for j in 0..pd[1] {
            let at = (i * pd[1] + j) * 3;
            if pv[at + 2] != 0.0 {
                lane.push([pv[at], pv[at + 1]]);
            }
        }
        map_polylines.push(lane);
    }
    let (d, v) = r.f32_field()?;
    let hist_occupancy = arr3(&file, &d, v)?;
    let (d, v) = r.f32_field()?;
    let hist_backward_flow = arr4(&file, &d, v)?;
    let (d, v) = r.f32_field()?;
    let map_raster = arr3(&file, &d, v)?;
    let (d, v) = r.u8_field()?;
    let gt_observed = arr3(&file, &d, v.into_iter().map(|b| b as f32).collect())?;
    let (d, v) = r.u8_field()?;
    let gt_occluded = arr3(&file, &d, v.into_iter().map(|b| b as f32).collect())?;
    let (d, v) = r.f32_field()?;
    let gt_flow = arr4(&file, &d, v)?;
    let (d, v) = r.u8_field()?;
    if !d.is_empty() || v.len() != 1 {
        return Err(format_err(&file, "ego index must be a rank-0 u8 field"));
    }
    Ok(SceneSample {
        agent_histories,
        map_polylines,
        hist_occupancy,
        hist_backward_flow,
        map_raster,
        gt_observed,
        gt_occluded,
        gt_flow,
        ego_index: v[0] as usize,
    })
}

/// Writes one shard file.
pub fn write_shard(path: &Path, samples: &[SceneSample]) -> Result<()> {
    let mut w = ShardWriter { out: BufWriter::new(File::create(path)?) };
    w.out.write_all(MAGIC)?;
    w.u32(VERSION)?;
    w.u32(samples.len() as u32)?;
    for s in samples {
        write_sample(&mut w, s)?;
    }
    w.out.flush()?;
    Ok(())
}

/// Reads one shard file, validating magic, version and field structure.
pub fn read_shard(path: &Path) -> Result<Vec<SceneSample>> {
    let mut r = ShardReader { inp: BufReader::new(File::open(path)?), file: path };
    let magic = r.bytes(4)?;
    if magic != MAGIC {
        return Err(format_err(path, format!("bad magic {magic:02x?}")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(read_sample(&mut r)?);
    }
    Ok(out)
}

/// Writes a dataset directory: shards of at most `shard_size` samples plus
/// an `index.txt` naming them in order.
pub fn write_dataset(dir: &Path, samples: &[SceneSample], shard_size: usize) -> Result<()> {
    assert!(shard_size > 0);
    std::fs::create_dir_all(dir)?;
    let mut index = String::new();
    for (k, chunk) in samples.chunks(shard_size).enumerate() {
        let name = format!("shard_{k:04}.hgn");
        write_shard(&dir.join(&name), chunk)?;
        index.push_str(&name);
        index.push('\n');
    }
    std::fs::write(dir.join("index.txt"), index)?;
    Ok(())
}

/// Reads every shard listed by the directory's index, in order.
pub fn read_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    let index_path = dir.join("index.txt");
    let index = std::fs::read_to_string(&index_path)
        .map_err(|e| format_err(&index_path, format!("cannot read index: {e}")))?;
    let mut out = Vec::new();
    for line in index.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let path: PathBuf = dir.join(line);
        out.extend(read_shard(&path)?);
    }
    Ok(out)
}
