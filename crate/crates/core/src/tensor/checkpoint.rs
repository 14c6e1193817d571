//! `DENETCKPT1` parameter files.
//!
//! Layout: the ASCII magic `DENETCKPT1`, then for each parameter in order:
//! name length (u32), UTF-8 name, rank (u32), rank extents (u64 each), and
//! the row-major values as f64. All integers and floats are little-endian.
//! The file ends after the last parameter.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{DenetError, Result};

pub const MAGIC: &[u8; 10] = b"DENETCKPT1";

pub fn write_params<'a, W, I>(mut out: W, params: I) -> std::io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    out.write_all(MAGIC)?;
    for (name, t) in params {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            out.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> std::result::Result<(), String> {
    r.read_exact(buf).map_err(|e| format!("truncated while reading {what}: {e}"))
}

/// Parses a parameter stream; errors are plain messages so callers can
/// attach the path.
pub fn read_params<R: Read>(mut r: R) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut magic = [0u8; 10];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err("missing DENETCKPT1 magic".into());
    }
    let mut params = Vec::new();
    loop {
        let mut len = [0u8; 4];
        match r.read(&mut len[..1]) {
            Ok(0) => break,
            Ok(_) => read_exact_or(&mut r, &mut len[1..], "name length")?,
            Err(e) => return Err(e.to_string()),
        }
        let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
        read_exact_or(&mut r, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| "parameter name is not UTF-8".to_string())?;
        let mut rank = [0u8; 4];
        read_exact_or(&mut r, &mut rank, "rank")?;
        let rank = u32::from_le_bytes(rank) as usize;
        if rank == 0 || rank > 8 {
            return Err(format!("parameter `{name}` has unsupported rank {rank}"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut e = [0u8; 8];
            read_exact_or(&mut r, &mut e, "extent")?;
            shape.push(u64::from_le_bytes(e) as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&n| n > 0 && n < (1 << 32))
            .ok_or_else(|| format!("parameter `{name}` has invalid extents {shape:?}"))?;
        let mut raw = vec![0u8; n * 8];
        read_exact_or(&mut r, &mut raw, &format!("values of `{name}`"))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        params.push((name, t));
    }
    Ok(params)
}

pub fn save<'a, I>(path: &Path, params: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let f = File::create(path).map_err(|e| DenetError::io(path, e))?;
    write_params(BufWriter::new(f), params).map_err(|e| DenetError::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let f = File::open(path).map_err(|e| DenetError::io(path, e))?;
    read_params(BufReader::new(f)).map_err(|msg| DenetError::format(path, msg))
}
