//! Wavefront OBJ I/O with per-vertex colors.
//!
//! Vertex lines carry either 3 floats (position; color defaults to black) or
//! 6 floats (position + RGB normalized to [0, 1] on disk, scaled to [0, 255]
//! in memory). Faces are triangles with 1-based indices; `a/b/c` index forms
//! are accepted and only the vertex index is used. Positions are written
//! with 6 decimals and colors with 9, so a round trip preserves both to
//! better than 1e-6 in their in-memory units.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use super::Mesh;
use crate::error::{Error, Result};

impl Mesh {
    pub fn save_obj(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for v in 0..self.n_vertices() {
            let p = self.vertex_position(v);
            let c = [
                self.colors[[v, 0]] / 255.0,
                self.colors[[v, 1]] / 255.0,
                self.colors[[v, 2]] / 255.0,
            ];
            writeln!(
                out,
                "v {:.6} {:.6} {:.6} {:.9} {:.9} {:.9}",
                p[0], p[1], p[2], c[0], c[1], c[2]
            )
            .expect("string write");
        }
        for f in &self.faces {
            writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).expect("string write");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load_obj(path: impl AsRef<Path>) -> Result<Mesh> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let name = path.display().to_string();
        let malformed = |line: usize, msg: String| Error::MalformedFile {
            path: name.clone(),
            line,
            msg,
        };

        let mut positions: Vec<f64> = Vec::new();
        let mut colors: Vec<f64> = Vec::new();
        let mut faces: Vec<[usize; 3]> = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut tokens = line.split_whitespace();
            match tokens.next() {
                Some("v") => {
                    let nums: Vec<f64> = tokens
                        .map(|t| {
                            t.parse::<f64>()
                                .map_err(|_| malformed(lineno, format!("bad float {t:?}")))
                        })
                        .collect::<Result<_>>()?;
                    match nums.len() {
                        3 => {
                            positions.extend_from_slice(&nums);
                            colors.extend_from_slice(&[0.0, 0.0, 0.0]);
                        }
                        6 => {
                            for &c in &nums[3..] {
                                if !(-1e-9..=1.0 + 1e-9).contains(&c) {
                                    return Err(malformed(
                                        lineno,
                                        format!("vertex color {c} outside [0, 1]"),
                                    ));
                                }
                            }
                            positions.extend_from_slice(&nums[..3]);
                            colors.extend(nums[3..].iter().map(|c| c.clamp(0.0, 1.0) * 255.0));
                        }
                        k => {
                            return Err(malformed(
                                lineno,
                                format!("vertex line has {k} floats, expected 3 or 6"),
                            ))
                        }
                    }
                }
                Some("f") => {
                    let ids: Vec<usize> = tokens
                        .map(|t| {
                            let head = t.split('/').next().unwrap_or("");
                            let v: i64 = head
                                .parse()
                                .map_err(|_| malformed(lineno, format!("bad face index {t:?}")))?;
                            if v == 0 {
                                return Err(malformed(
                                    lineno,
                                    "face index 0 (OBJ indices are 1-based)".into(),
                                ));
                            }
                            if v < 0 {
                                return Err(malformed(
                                    lineno,
                                    "negative (relative) face indices are not supported".into(),
                                ));
                            }
                            Ok(v as usize - 1)
                        })
                        .collect::<Result<_>>()?;
                    if ids.len() != 3 {
                        return Err(malformed(
                            lineno,
                            format!("face has {} vertices, only triangles are supported", ids.len()),
                        ));
                    }
                    faces.push([ids[0], ids[1], ids[2]]);
                }
                // Common OBJ records we don't model are skipped.
                Some("vn") | Some("vt") | Some("o") | Some("g") | Some("s") | Some("mtllib")
                | Some("usemtl") | Some("l") => {}
                Some(other) => {
                    return Err(malformed(lineno, format!("unrecognized record {other:?}")))
                }
                None => {}
            }
        }

        let n = positions.len() / 3;
        let mesh = Mesh::new(
            Array2::from_shape_vec((n, 3), positions).expect("shape"),
            Array2::from_shape_vec((n, 3), colors).expect("shape"),
            faces,
        )
        .map_err(|e| Error::MalformedFile {
            path: name.clone(),
            line: 0,
            msg: e.to_string(),
        })?;
        Ok(mesh)
    }
}
