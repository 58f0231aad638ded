//! Self-describing binary archive of named arrays.
//!
//! Layout (little endian): magic `LABESCKP`, u32 version, u64 header length,
//! UTF-8 JSON header, u32 array count, then per array: u32 name length, name,
//! u8 dtype (1 = f64), u32 rank, u64 dims, raw data.

use std::io::{Read, Write};
use std::path::Path;

use super::params::{Param, ParameterSet};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LABESCKP";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

pub fn write_archive(mut w: impl Write, header: &serde_json::Value, params: &ParameterSet) -> Result<()> {
    let io = |e| Error::Checkpoint(format!("write failed: {e}"));
    let header = serde_json::to_vec(header).map_err(|e| Error::json("checkpoint header", e))?;
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    w.write_all(&(params.len() as u32).to_le_bytes()).map_err(io)?;
    for (_, p) in params.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(p.name.as_bytes()).map_err(io)?;
        w.write_all(&[DTYPE_F64]).map_err(io)?;
        w.write_all(&2u32.to_le_bytes()).map_err(io)?;
        w.write_all(&(p.rows as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&(p.cols as u64).to_le_bytes()).map_err(io)?;
        let mut buf = Vec::with_capacity(p.data.len() * 8);
        for x in &p.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated archive: {e}")))?;
    Ok(b)
}

pub fn read_archive(mut r: impl Read) -> Result<(serde_json::Value, ParameterSet)> {
    if &take::<8>(&mut r)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(take(&mut r)?) as usize;
    let mut header = vec![0u8; hlen];
    r.read_exact(&mut header)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    let header: serde_json::Value = serde_json::from_slice(&header).map_err(|e| Error::json("checkpoint header", e))?;
    let count = u32::from_le_bytes(take(&mut r)?);
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let nlen = u32::from_le_bytes(take(&mut r)?) as usize;
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("non-utf8 array name".into()))?;
        let [dtype] = take::<1>(&mut r)?;
        if dtype != DTYPE_F64 {
            return Err(Error::Checkpoint(format!("array `{name}`: unsupported dtype {dtype}")));
        }
        let rank = u32::from_le_bytes(take(&mut r)?) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u64::from_le_bytes(take(&mut r)?) as usize);
        }
        let (rows, cols) = match dims.as_slice() {
            [n] => (1, *n),
            [a, b] => (*a, *b),
            _ => return Err(Error::Checkpoint(format!("array `{name}`: rank {rank} unsupported"))),
        };
        let mut raw = vec![0u8; rows * cols * 8];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Checkpoint(format!("array `{name}` truncated: {e}")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.add(name, rows, cols, data)?;
    }
    Ok((header, params))
}

pub fn save(path: impl AsRef<Path>, header: &serde_json::Value, params: &ParameterSet) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_archive(&mut w, header, params)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(serde_json::Value, ParameterSet)> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_archive(std::io::BufReader::new(f))
}

/// Copy values from `src` into `dst` by name; every `dst` array must be present
/// with the same shape.
pub fn assign_by_name(dst: &mut ParameterSet, src: &ParameterSet) -> Result<()> {
    let ids: Vec<_> = dst.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let sid = src
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))?;
        let Param { rows, cols, data, .. } = src.get(sid);
        let d = dst.get_mut(id);
        if d.rows != *rows || d.cols != *cols {
            return Err(Error::Checkpoint(format!(
                "array `{name}`: shape {}x{} != {}x{}",
                rows, cols, d.rows, d.cols
            )));
        }
        d.data.clone_from(data);
    }
    Ok(())
}
