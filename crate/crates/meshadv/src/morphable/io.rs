//! Binary container for morphable models.
//!
//! Layout (all little-endian): magic "MADVMM01"; u64 header fields seed,
//! grid_resolution, n, m, dim_id, dim_exp, dim_tex; then f64 payloads
//! mean_shape (3n), mean_texture (3n), basis_id (3n*dim_id, row-major),
//! basis_exp, basis_tex, coeff_std_id, coeff_std_exp, coeff_std_tex; then
//! faces as m*3 u32. No padding; trailing bytes are rejected.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{flatten_rows, MorphableModel};
use crate::io_util::{
    check_magic, read_f64_vec, read_u32_vec, read_u64, write_f64_slice, write_u32_slice, write_u64,
};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"MADVMM01";

pub fn save_model(model: &MorphableModel, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let n = model.n_vertices() as u64;
    write_u64(&mut w, model.seed)?;
    write_u64(&mut w, model.grid_resolution as u64)?;
    write_u64(&mut w, n)?;
    write_u64(&mut w, model.faces.len() as u64)?;
    write_u64(&mut w, model.basis_id.ncols() as u64)?;
    write_u64(&mut w, model.basis_exp.ncols() as u64)?;
    write_u64(&mut w, model.basis_tex.ncols() as u64)?;
    write_f64_slice(&mut w, &flatten_rows(model.mean_shape.view()))?;
    write_f64_slice(&mut w, &flatten_rows(model.mean_texture.view()))?;
    write_f64_slice(&mut w, &flatten_rows(model.basis_id.view()))?;
    write_f64_slice(&mut w, &flatten_rows(model.basis_exp.view()))?;
    write_f64_slice(&mut w, &flatten_rows(model.basis_tex.view()))?;
    write_f64_slice(&mut w, &model.coeff_std_id)?;
    write_f64_slice(&mut w, &model.coeff_std_exp)?;
    write_f64_slice(&mut w, &model.coeff_std_tex)?;
    let mut face_words = Vec::with_capacity(model.faces.len() * 3);
    for f in &model.faces {
        for &v in f {
            face_words.push(v as u32);
        }
    }
    write_u32_slice(&mut w, &face_words)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MorphableModel> {
    let path_str = path.as_ref().display().to_string();
    let malformed = |msg: String| Error::MalformedFile {
        path: path_str.clone(),
        line: 0,
        msg,
    };

    let mut r = BufReader::new(File::open(&path)?);
    check_magic(&mut r, MAGIC, &path_str)?;
    let seed = read_u64(&mut r)?;
    let grid_resolution = read_u64(&mut r)? as usize;
    let n = read_u64(&mut r)? as usize;
    let m = read_u64(&mut r)? as usize;
    let dim_id = read_u64(&mut r)? as usize;
    let dim_exp = read_u64(&mut r)? as usize;
    let dim_tex = read_u64(&mut r)? as usize;
    if n != grid_resolution * grid_resolution {
        return Err(malformed(format!(
            "vertex count {n} does not match grid resolution {grid_resolution}"
        )));
    }
    if n == 0 || m == 0 {
        return Err(malformed("empty model".into()));
    }

    let to_mat = |v: Vec<f64>, rows: usize, cols: usize, what: &str| -> Result<Array2<f64>> {
        Array2::from_shape_vec((rows, cols), v)
            .map_err(|e| malformed(format!("{what}: {e}")))
    };
    let mean_shape = to_mat(read_f64_vec(&mut r, 3 * n)?, n, 3, "mean_shape")?;
    let mean_texture = to_mat(read_f64_vec(&mut r, 3 * n)?, n, 3, "mean_texture")?;
    let basis_id = to_mat(read_f64_vec(&mut r, 3 * n * dim_id)?, 3 * n, dim_id, "basis_id")?;
    let basis_exp = to_mat(
        read_f64_vec(&mut r, 3 * n * dim_exp)?,
        3 * n,
        dim_exp,
        "basis_exp",
    )?;
    let basis_tex = to_mat(
        read_f64_vec(&mut r, 3 * n * dim_tex)?,
        3 * n,
        dim_tex,
        "basis_tex",
    )?;
    let coeff_std_id = read_f64_vec(&mut r, dim_id)?;
    let coeff_std_exp = read_f64_vec(&mut r, dim_exp)?;
    let coeff_std_tex = read_f64_vec(&mut r, dim_tex)?;
    let face_words = read_u32_vec(&mut r, m * 3)?;
    let mut faces = Vec::with_capacity(m);
    for c in face_words.chunks_exact(3) {
        let f = [c[0] as usize, c[1] as usize, c[2] as usize];
        if f.iter().any(|&v| v >= n) {
            return Err(malformed(format!("face index out of range: {f:?}")));
        }
        faces.push(f);
    }

    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(malformed("trailing bytes after payload".into()));
    }

    Ok(MorphableModel {
        mean_shape,
        mean_texture,
        basis_id,
        basis_exp,
        basis_tex,
        faces,
        coeff_std_id,
        coeff_std_exp,
        coeff_std_tex,
        seed,
        grid_resolution,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphable::generate_synthetic_model;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let m = generate_synthetic_model(17, 16).unwrap();
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn saves_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        let m = generate_synthetic_model(17, 8).unwrap();
        save_model(&m, &p1).unwrap();
        save_model(&m, &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOTMAGIC________").unwrap();
        assert!(matches!(
            load_model(&path),
            Err(Error::MalformedFile { .. })
        ));
    }

    #[test]
    fn rejects_truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let m = generate_synthetic_model(3, 8).unwrap();
        save_model(&m, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_model(&path).is_err());
    }

    #[test]
    fn rejects_trailing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let m = generate_synthetic_model(3, 8).unwrap();
        save_model(&m, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(Error::MalformedFile { .. })
        ));
    }
}
