//! Little-endian binary helpers for the cache and ensemble files.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn put_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn put_f64s(w: &mut impl Write, v: &[f64]) -> Result<()> {
    put_u64(w, v.len() as u64)?;
    let mut buf = Vec::with_capacity(v.len() * 8);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

pub fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

pub fn get_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(f64::from_le_bytes(b))
}

/// Reads a length-prefixed `f64` array, failing if the length is not `expect`.
pub fn get_f64s(r: &mut impl Read, expect: usize) -> Result<Vec<f64>> {
    let n = get_u64(r)? as usize;
    if n != expect {
        return Err(Error::Format(format!("array length {n}, expected {expect}")));
    }
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn expect_magic(r: &mut impl Read, magic: &[u8; 8]) -> Result<()> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    if &b != magic {
        return Err(Error::Format("unrecognized file header".into()));
    }
    Ok(())
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("file is truncated".into())
    } else {
        Error::Io(e)
    }
}
