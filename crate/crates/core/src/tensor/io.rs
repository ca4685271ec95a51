//! Tensor persistence.
//!
//! Binary layout (little-endian): `b"CSGT"`, `u32` rank, `rank` x `u64`
//! dims, then the `f64` payload in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{CsgError, Result};

pub const MAGIC: &[u8; 4] = b"CSGT";

pub fn write_tensor<W: Write>(t: &Tensor, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R, origin: &Path) -> Result<Tensor> {
    let bad = |reason: &str| CsgError::Format {
        path: origin.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|_| bad("truncated rank"))?;
    let rank = u32::from_le_bytes(b4) as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8).map_err(|_| bad("truncated dims"))?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        r.read_exact(&mut b8).map_err(|_| bad("truncated payload"))?;
        data.push(f64::from_le_bytes(b8));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after payload"));
    }
    Tensor::new(shape, data)
}

pub fn save(t: &Tensor, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(t, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensor> {
    read_tensor(BufReader::new(File::open(path)?), path)
}

/// Render a matrix as CSV, one row per line, shortest round-trip floats.
pub fn to_csv(t: &Tensor) -> Result<String> {
    let (rows, cols) = super::kernels::dims2(t)?;
    let mut out = String::with_capacity(rows * cols * 8);
    for r in 0..rows {
        let line: Vec<String> = t.data()[r * cols..(r + 1) * cols].iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn save_csv(t: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(t)?)?;
    Ok(())
}
