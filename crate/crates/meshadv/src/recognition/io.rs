//! Embedding-model weight container.
//!
//! Layout, all little-endian after the 8-byte magic `MADVEMB1`:
//! architecture id (u64: 0 = A, 1 = B), seed (u64), weight count (u64),
//! then the flat weight array as f64. The count must match what the
//! architecture implies, and trailing bytes are rejected.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{weight_count, ArchId, EmbeddingModel};
use crate::io_util::{check_magic, expect_u64, read_f64_vec, read_u64, write_f64_slice, write_u64};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"MADVEMB1";

pub fn save_weights(path: impl AsRef<Path>, model: &EmbeddingModel) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    write_u64(&mut out, match model.arch {
        ArchId::A => 0,
        ArchId::B => 1,
    })?;
    write_u64(&mut out, model.seed)?;
    write_u64(&mut out, model.weights.len() as u64)?;
    write_f64_slice(&mut out, &model.weights)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<EmbeddingModel> {
    let path_str = path.as_ref().display().to_string();
    let mut reader = BufReader::new(File::open(&path)?);
    check_magic(&mut reader, MAGIC, &path_str)?;
    let arch = match read_u64(&mut reader)? {
        0 => ArchId::A,
        1 => ArchId::B,
        other => {
            return Err(Error::MalformedFile {
                path: path_str,
                line: 0,
                msg: format!("unknown architecture id {other}"),
            })
        }
    };
    let seed = read_u64(&mut reader)?;
    let expected = weight_count(arch) as u64;
    expect_u64(&mut reader, expected, "weight count", &path_str)?;
    let weights = read_f64_vec(&mut reader, expected as usize)?;
    if weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::MalformedFile {
            path: path_str,
            line: 0,
            msg: "non-finite weight".to_string(),
        });
    }
    let mut probe = [0u8; 1];
    if reader.read(&mut probe)? != 0 {
        return Err(Error::MalformedFile {
            path: path_str,
            line: 0,
            msg: "trailing bytes after payload".to_string(),
        });
    }
    Ok(EmbeddingModel { arch, seed, weights })
}

#[cfg(test)]
mod tests {
    use super::super::build_toy_model;
    use super::*;

    #[test]
    fn round_trip_is_exact_and_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        for (i, arch) in [ArchId::A, ArchId::B].into_iter().enumerate() {
            let model = build_toy_model(arch, 42);
            let p1 = dir.path().join(format!("m{i}.emb"));
            let p2 = dir.path().join(format!("m{i}b.emb"));
            save_weights(&p1, &model).unwrap();
            save_weights(&p2, &model).unwrap();
            assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
            let back = load_weights(&p1).unwrap();
            assert_eq!(model, back);
        }
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_toy_model(ArchId::B, 8);
        let p = dir.path().join("m.emb");
        save_weights(&p, &model).unwrap();
        let bytes = std::fs::read(&p).unwrap();

        let cases: Vec<(&str, Vec<u8>)> = vec![
            ("magic", {
                let mut b = bytes.clone();
                b[3] ^= 0x55;
                b
            }),
            ("arch", {
                let mut b = bytes.clone();
                b[8] = 9;
                b
            }),
            ("count", {
                let mut b = bytes.clone();
                b[24] ^= 1;
                b
            }),
            ("truncated", bytes[..bytes.len() - 4].to_vec()),
            ("trailing", {
                let mut b = bytes.clone();
                b.push(0);
                b
            }),
        ];
        for (name, data) in cases {
            let bad = dir.path().join(format!("{name}.emb"));
            std::fs::write(&bad, data).unwrap();
            assert!(load_weights(&bad).is_err(), "case {name} should fail");
        }
    }
}
