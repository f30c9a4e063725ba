//! Image and render-buffer file formats.
//!
//! Color images travel as binary PPM (P6, maxval 255, values quantized by
//! round-to-nearest after clamping to [0, 255]); coverage masks as binary
//! PGM (P5, 0 or 255). The full float-precision render state — image,
//! mask, face ids, barycentric weights, depth — goes into a magic-tagged
//! little-endian container so downstream tools can reload exactly what the
//! rasterizer produced.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::io_util::{check_magic, read_f64_vec, read_u64, write_f64_slice, write_u64};
use crate::{Error, Result};

const RAW_MAGIC: &[u8; 8] = b"MADVRAW1";

/// Render buffers reloaded from a raw container file.
#[derive(Debug, Clone)]
pub struct RawBuffers {
    pub image: Array3<f64>,
    pub mask: Array2<u8>,
    pub face_id_buffer: Array2<i32>,
    pub barycentric_buffer: Array3<f64>,
    pub depth_buffer: Array2<f64>,
}

/// Writes an H×W×3 float image as binary PPM, clamping to [0, 255] and
/// rounding to the nearest integer.
pub fn save_ppm(path: impl AsRef<Path>, image: &Array3<f64>) -> Result<()> {
    let (h, w, ch) = image.dim();
    if ch != 3 {
        return Err(Error::dim("image channels", 3usize, ch));
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let mut bytes = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            for k in 0..3 {
                bytes.push(image[[r, c, k]].clamp(0.0, 255.0).round() as u8);
            }
        }
    }
    out.write_all(&bytes)?;
    Ok(())
}

/// Reads a binary PPM written by [`save_ppm`] (or any P6 file with
/// maxval 255) into an H×W×3 float array.
pub fn load_ppm(path: impl AsRef<Path>) -> Result<Array3<f64>> {
    let path_str = path.as_ref().display().to_string();
    let mut reader = BufReader::new(File::open(&path)?);
    let (w, h) = read_netpbm_header(&mut reader, "P6", &path_str)?;
    let mut bytes = vec![0u8; h * w * 3];
    reader.read_exact(&mut bytes)?;
    let mut image = Array3::zeros((h, w, 3));
    for r in 0..h {
        for c in 0..w {
            for k in 0..3 {
                image[[r, c, k]] = bytes[(r * w + c) * 3 + k] as f64;
            }
        }
    }
    Ok(image)
}

/// Writes a coverage mask as binary PGM: covered pixels 255, background 0.
pub fn save_pgm(path: impl AsRef<Path>, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = mask.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect();
    out.write_all(&bytes)?;
    Ok(())
}

/// Reads a binary PGM into a 0/1 mask: any nonzero byte counts as covered.
pub fn load_pgm(path: impl AsRef<Path>) -> Result<Array2<u8>> {
    let path_str = path.as_ref().display().to_string();
    let mut reader = BufReader::new(File::open(&path)?);
    let (w, h) = read_netpbm_header(&mut reader, "P5", &path_str)?;
    let mut bytes = vec![0u8; h * w];
    reader.read_exact(&mut bytes)?;
    Ok(Array2::from_shape_fn((h, w), |(r, c)| {
        u8::from(bytes[r * w + c] != 0)
    }))
}

/// Parses "Px\n<w> <h>\n<maxval>\n" allowing arbitrary whitespace and
/// `#` comment lines between tokens, as the format permits.
fn read_netpbm_header(
    reader: &mut impl BufRead,
    expected_tag: &str,
    path: &str,
) -> Result<(usize, usize)> {
    let malformed = |msg: &str| Error::MalformedFile {
        path: path.to_string(),
        line: 0,
        msg: msg.to_string(),
    };
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        let tok = next_token(reader)?;
        if tok.is_empty() {
            return Err(malformed("truncated header"));
        }
        tokens.push(tok);
    }
    if tokens[0] != expected_tag {
        return Err(malformed(&format!(
            "expected {expected_tag}, got {}",
            tokens[0]
        )));
    }
    let w: usize = tokens[1].parse().map_err(|_| malformed("bad width"))?;
    let h: usize = tokens[2].parse().map_err(|_| malformed("bad height"))?;
    let maxval: usize = tokens[3].parse().map_err(|_| malformed("bad maxval"))?;
    if maxval != 255 {
        return Err(malformed("only maxval 255 is supported"));
    }
    if w == 0 || h == 0 {
        return Err(malformed("zero image dimension"));
    }
    Ok((w, h))
}

/// Reads one whitespace-delimited token, skipping `#` comments. Consumes
/// exactly one trailing whitespace byte, so binary payload after the
/// maxval token stays intact.
fn next_token(reader: &mut impl BufRead) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if reader.read(&mut byte)? == 0 {
            return Ok(String::from_utf8_lossy(&tok).into_owned());
        }
        match byte[0] {
            b'#' if tok.is_empty() => {
                // Comment runs to end of line.
                let mut skip = Vec::new();
                reader.read_until(b'\n', &mut skip)?;
            }
            b' ' | b'\t' | b'\r' | b'\n' => {
                if !tok.is_empty() {
                    return Ok(String::from_utf8_lossy(&tok).into_owned());
                }
            }
            b => tok.push(b),
        }
    }
}

/// Writes every render buffer at full float precision.
pub fn save_raw_buffers(path: impl AsRef<Path>, buffers: &RawBuffers) -> Result<()> {
    let (h, w, _) = buffers.image.dim();
    if buffers.image.dim().2 != 3 || buffers.barycentric_buffer.dim() != (h, w, 3) {
        return Err(Error::dim(
            "raw buffer shapes",
            format!("({h}, {w}, 3)"),
            format!("{:?}", buffers.barycentric_buffer.dim()),
        ));
    }
    if buffers.mask.dim() != (h, w)
        || buffers.face_id_buffer.dim() != (h, w)
        || buffers.depth_buffer.dim() != (h, w)
    {
        return Err(Error::dim(
            "raw buffer shapes",
            format!("({h}, {w})"),
            format!("{:?}", buffers.mask.dim()),
        ));
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(RAW_MAGIC)?;
    write_u64(&mut out, h as u64)?;
    write_u64(&mut out, w as u64)?;
    write_f64_slice(&mut out, buffers.image.as_slice().unwrap())?;
    out.write_all(buffers.mask.as_slice().unwrap())?;
    for &fid in buffers.face_id_buffer.iter() {
        out.write_all(&(fid as i64).to_le_bytes())?;
    }
    write_f64_slice(&mut out, buffers.barycentric_buffer.as_slice().unwrap())?;
    write_f64_slice(&mut out, buffers.depth_buffer.as_slice().unwrap())?;
    Ok(())
}

/// Reads a raw buffer container back, bit-for-bit.
pub fn load_raw_buffers(path: impl AsRef<Path>) -> Result<RawBuffers> {
    let path_str = path.as_ref().display().to_string();
    let mut reader = BufReader::new(File::open(&path)?);
    check_magic(&mut reader, RAW_MAGIC, &path_str)?;
    let h = read_u64(&mut reader)? as usize;
    let w = read_u64(&mut reader)? as usize;
    if h == 0 || w == 0 || h > 1 << 20 || w > 1 << 20 {
        return Err(Error::MalformedFile {
            path: path_str,
            line: 0,
            msg: format!("implausible dimensions {h}x{w}"),
        });
    }
    let image = Array3::from_shape_vec((h, w, 3), read_f64_vec(&mut reader, h * w * 3)?)
        .expect("shape matches read length");
    let mut mask_bytes = vec![0u8; h * w];
    reader.read_exact(&mut mask_bytes)?;
    let mask = Array2::from_shape_vec((h, w), mask_bytes).expect("shape matches read length");
    let mut fids = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        let mut b = [0u8; 8];
        reader.read_exact(&mut b)?;
        fids.push(i64::from_le_bytes(b) as i32);
    }
    let face_id_buffer =
        Array2::from_shape_vec((h, w), fids).expect("shape matches read length");
    let barycentric_buffer =
        Array3::from_shape_vec((h, w, 3), read_f64_vec(&mut reader, h * w * 3)?)
            .expect("shape matches read length");
    let depth_buffer = Array2::from_shape_vec((h, w), read_f64_vec(&mut reader, h * w)?)
        .expect("shape matches read length");
    let mut probe = [0u8; 1];
    if reader.read(&mut probe)? != 0 {
        return Err(Error::MalformedFile {
            path: path_str,
            line: 0,
            msg: "trailing bytes after payload".to_string(),
        });
    }
    Ok(RawBuffers {
        image,
        mask,
        face_id_buffer,
        barycentric_buffer,
        depth_buffer,
    })
}
