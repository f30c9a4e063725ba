//! Colored triangle meshes: validation, adjacency, patch extraction,
//! discrete Gaussian curvature, geometric losses, and OBJ I/O.

mod curvature;
mod losses;
mod obj;
mod patch;
pub mod primitives;

pub use curvature::CurvatureReport;
pub use losses::{
    chamfer_distance, chamfer_with_grad, edge_length_loss_on, edge_length_with_grad,
    laplacian_loss_on, laplacian_with_grad, mean_edge_length_deviation,
};
pub use patch::{extract_patch, CustomBox, PatchRegion, PatchTopology};

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Triangle mesh with per-vertex RGB colors.
///
/// Invariants, checked by [`Mesh::new`] and [`Mesh::validate`]:
/// positions and colors are n×3 with finite entries, colors lie in
/// [0, 255], every face references three distinct in-range vertices.
/// Unreferenced vertices are allowed (patch meshes keep the full vertex
/// array and restrict the face list).
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub positions: Array2<f64>,
    pub colors: Array2<f64>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(positions: Array2<f64>, colors: Array2<f64>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = Mesh {
            positions,
            colors,
            faces,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn n_vertices(&self) -> usize {
        self.positions.nrows()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.nrows();
        if self.positions.ncols() != 3 {
            return Err(Error::dim("positions", "n x 3", format!("n x {}", self.positions.ncols())));
        }
        if self.colors.shape() != self.positions.shape() {
            return Err(Error::dim(
                "colors",
                format!("{} x 3", n),
                format!("{} x {}", self.colors.nrows(), self.colors.ncols()),
            ));
        }
        if self.positions.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("positions", "non-finite coordinate"));
        }
        for (i, c) in self.colors.iter().enumerate() {
            if !c.is_finite() || !(0.0..=255.0).contains(c) {
                return Err(Error::validation(
                    format!("colors[{}]", i / 3),
                    format!("channel value {c} outside [0, 255]"),
                ));
            }
        }
        for (fi, f) in self.faces.iter().enumerate() {
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::validation(
                    format!("faces[{fi}]"),
                    "degenerate face (repeated vertex)",
                ));
            }
            for &v in f {
                if v >= n {
                    return Err(Error::validation(
                        format!("faces[{fi}]"),
                        format!("vertex index {v} out of range (n = {n})"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn vertex_position(&self, v: usize) -> [f64; 3] {
        [
            self.positions[[v, 0]],
            self.positions[[v, 1]],
            self.positions[[v, 2]],
        ]
    }

    /// Edge → incident-face-count map. Edges are stored as (min, max).
    pub(crate) fn edge_counts(&self) -> BTreeMap<(usize, usize), usize> {
        let mut counts = BTreeMap::new();
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                let key = (a.min(b), a.max(b));
                *counts.entry(key).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Per-vertex incident face lists.
    pub(crate) fn incident_faces(&self) -> Vec<Vec<usize>> {
        let mut inc = vec![Vec::new(); self.n_vertices()];
        for (fi, f) in self.faces.iter().enumerate() {
            for &v in f {
                inc[v].push(fi);
            }
        }
        inc
    }

    /// true for vertices that touch an edge with exactly one incident face.
    pub(crate) fn boundary_flags(&self) -> Vec<bool> {
        let mut boundary = vec![false; self.n_vertices()];
        for ((a, b), count) in self.edge_counts() {
            if count == 1 {
                boundary[a] = true;
                boundary[b] = true;
            }
        }
        boundary
    }

    /// true for vertices referenced by at least one face.
    pub(crate) fn referenced_flags(&self) -> Vec<bool> {
        let mut referenced = vec![false; self.n_vertices()];
        for f in &self.faces {
            for &v in f {
                referenced[v] = true;
            }
        }
        referenced
    }

    /// Axis-aligned bounds over all vertices: (min, max) per coordinate.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for row in self.positions.rows() {
            for c in 0..3 {
                lo[c] = lo[c].min(row[c]);
                hi[c] = hi[c].max(row[c]);
            }
        }
        (lo, hi)
    }

    /// Symmetric mean-squared chamfer distance between the two vertex sets.
    pub fn chamfer_distance(&self, other: &Mesh) -> Result<f64> {
        chamfer_distance(self.positions.view(), other.positions.view())
    }

    /// Mean squared deviation of each referenced vertex from its
    /// one-ring neighbor centroid. See [`laplacian_loss_on`].
    pub fn laplacian_loss(&self) -> Result<f64> {
        laplacian_loss_on(self.positions.view(), &self.faces)
    }

    /// Mean squared edge-length deviation against a reference mesh with the
    /// identical face list. See [`edge_length_loss_on`].
    pub fn edge_length_loss(&self, reference: &Mesh) -> Result<f64> {
        if self.faces != reference.faces {
            return Err(Error::TopologyMismatch);
        }
        edge_length_loss_on(self.positions.view(), reference.positions.view(), &self.faces)
    }
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}
