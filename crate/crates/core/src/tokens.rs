//! Binary token dumps.
//!
//! A dump is a sequence of little-endian `f64` values: an eight-value
//! header `[magic, version, rows, cols, w, h, frames, P]` followed by
//! `rows * cols` token values in row-major order, spatial frames first (in
//! frame order, each in grid order) and pointer tokens last. `rows` always
//! equals `frames * w * h + P`. Round trips are bit-exact.

use std::io::{Read, Write};

use crate::attention::{MemoryBank, SpatialGrid};
use crate::error::{AttnError, Result};
use crate::tensor::TokenMatrix;

/// `"MATK"` read as a big-endian integer.
pub const TOKEN_DUMP_MAGIC: f64 = 1_296_127_051.0;
pub const TOKEN_DUMP_VERSION: f64 = 1.0;
const HEADER_LEN: usize = 8;

pub fn write_bank<W: Write>(bank: &MemoryBank, mut out: W) -> Result<()> {
    let (w, h) = bank.frame_shape();
    let header = [
        TOKEN_DUMP_MAGIC,
        TOKEN_DUMP_VERSION,
        bank.len() as f64,
        bank.dim() as f64,
        w as f64,
        h as f64,
        bank.frames().len() as f64,
        bank.pointer_len() as f64,
    ];
    let mut buf = Vec::with_capacity((HEADER_LEN + bank.len() * bank.dim()) * 8);
    for v in header {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for f in bank.frames() {
        for v in f.tokens().data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in bank.pointers().data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Writes a single grid as a one-frame bank with no pointers.
pub fn write_grid<W: Write>(grid: &SpatialGrid, out: W) -> Result<()> {
    let bank = MemoryBank::new(vec![grid.clone()], TokenMatrix::zeros(0, grid.dim()))?;
    write_bank(&bank, out)
}

fn header_count(v: f64, field: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v <= (1u64 << 52) as f64 {
        Ok(v as usize)
    } else {
        Err(AttnError::Format(format!(
            "header field {field} is not a count: {v}"
        )))
    }
}

pub fn read_bank<R: Read>(mut input: R) -> Result<MemoryBank> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 || bytes.len() < HEADER_LEN * 8 {
        return Err(AttnError::Format(format!(
            "token dump of {} bytes is truncated",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let (header, body) = values.split_at(HEADER_LEN);
    if header[0] != TOKEN_DUMP_MAGIC {
        return Err(AttnError::Format("bad magic; not a token dump".into()));
    }
    if header[1] != TOKEN_DUMP_VERSION {
        return Err(AttnError::Format(format!(
            "unsupported token dump version {}",
            header[1]
        )));
    }
    let names = ["rows", "cols", "w", "h", "frames", "P"];
    let mut counts = [0usize; 6];
    for (i, name) in names.iter().enumerate() {
        counts[i] = header_count(header[2 + i], name)?;
    }
    let [rows, cols, w, h, frames, pointers] = counts;
    if rows != frames * w * h + pointers {
        return Err(AttnError::Format(format!(
            "rows {rows} != frames {frames} x {w} x {h} + P {pointers}"
        )));
    }
    if body.len() != rows * cols {
        return Err(AttnError::Format(format!(
            "expected {} token values, found {}",
            rows * cols,
            body.len()
        )));
    }
    let per_frame = w * h * cols;
    let grids = (0..frames)
        .map(|f| {
            SpatialGrid::from_data(
                w,
                h,
                cols,
                body[f * per_frame..(f + 1) * per_frame].to_vec(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let ptr = TokenMatrix::new(pointers, cols, body[frames * per_frame..].to_vec())?;
    MemoryBank::new(grids, ptr)
}
