//! Little-endian binary primitives shared by the file containers.
//!
//! Every on-disk format in this crate is a magic-tagged little-endian
//! stream of u64 header words followed by f64/u32 payload arrays, so the
//! same few helpers serve the morphable-model, embedder-weight, and raw
//! render containers.

use std::io::{Read, Write};

use crate::{Error, Result};

pub(crate) fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn write_f64_slice(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    for &x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_f64_vec(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub(crate) fn write_u32_slice(w: &mut impl Write, xs: &[u32]) -> Result<()> {
    for &x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_u32_vec(r: &mut impl Read, n: usize) -> Result<Vec<u32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Reads and checks an 8-byte magic tag; a mismatch is a malformed-file error.
pub(crate) fn check_magic(r: &mut impl Read, expected: &[u8; 8], path: &str) -> Result<()> {
    let mut got = [0u8; 8];
    r.read_exact(&mut got)?;
    if &got != expected {
        return Err(Error::MalformedFile {
            path: path.to_string(),
            line: 0,
            msg: format!(
                "bad magic: expected {:?}, got {:?}",
                String::from_utf8_lossy(expected),
                String::from_utf8_lossy(&got)
            ),
        });
    }
    Ok(())
}

/// Reads a u64 header field and checks it against an expected value.
pub(crate) fn expect_u64(r: &mut impl Read, expected: u64, what: &str, path: &str) -> Result<u64> {
    let got = read_u64(r)?;
    if got != expected {
        return Err(Error::MalformedFile {
            path: path.to_string(),
            line: 0,
            msg: format!("{what}: expected {expected}, got {got}"),
        });
    }
    Ok(got)
}
