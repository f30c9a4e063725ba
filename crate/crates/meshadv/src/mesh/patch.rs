//! Patch extraction: select the mesh sub-region an attack may modify.
//!
//! Regions are parametric volumes in the canonical face frame produced by
//! the synthetic morphable model: x right, y up (chin toward y < 0, forehead
//! y > 0), z ≤ 0 toward the camera, with the face spanning x, y ∈ [−10, 10].
//! A face is kept when all three of its vertices satisfy the region
//! predicate; the kept vertex set is exactly the union of kept faces.

use serde::{Deserialize, Serialize};

use super::Mesh;
use crate::error::{Error, Result};

/// Axis-aligned box used by custom regions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CustomBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl CustomBox {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }
}

/// Built-in attack regions plus a custom union-of-boxes escape hatch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "region_id")]
pub enum PatchRegion {
    /// Horizontal band at eye height across both eyes.
    Eye,
    /// Eye band unioned with a nose wedge that widens toward the mouth.
    EyeNose,
    /// Lower-face half-space intersected with an ellipsoid around the
    /// mouth/chin area (a respirator-shaped volume).
    Respirator,
    /// Union of caller-supplied axis-aligned boxes.
    Custom { boxes: Vec<CustomBox> },
}

impl PatchRegion {
    /// Region membership for a point in the canonical face frame.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let [x, y, z] = p;
        match self {
            PatchRegion::Eye => (y - 2.5).abs() <= 2.0 && x.abs() <= 7.0,
            PatchRegion::EyeNose => {
                let eye = (y - 2.5).abs() <= 2.0 && x.abs() <= 7.0;
                // Wedge: half-width 1.2 at the eye line, widening downward.
                let wedge =
                    (-4.5..=0.5).contains(&y) && x.abs() <= 1.2 + 0.3 * (0.5 - y);
                eye || wedge
            }
            PatchRegion::Respirator => {
                let lower = y <= -1.0;
                let ex = x / 6.5;
                let ey = (y + 4.5) / 4.0;
                let ez = (z + 2.5) / 4.0;
                lower && ex * ex + ey * ey + ez * ez <= 1.0
            }
            PatchRegion::Custom { boxes } => boxes.iter().any(|b| b.contains(p)),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PatchRegion::Eye => "Eye",
            PatchRegion::EyeNose => "EyeNose",
            PatchRegion::Respirator => "Respirator",
            PatchRegion::Custom { .. } => "Custom",
        }
    }
}

/// The faces an attack may touch, with the vertices they reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchTopology {
    /// Subset of the base mesh's faces, in base-mesh vertex indices.
    pub faces: Vec<[usize; 3]>,
    /// Sorted vertex ids: exactly the union of `faces`' vertices.
    pub kept_vertices: Vec<usize>,
    /// Region that produced this patch.
    pub region: PatchRegion,
}

impl PatchTopology {
    /// Topology covering the whole mesh: every face, every referenced
    /// vertex. Used for full-face renders as opposed to patch renders.
    pub fn full(mesh: &Mesh) -> PatchTopology {
        let faces = mesh.faces.clone();
        let mut kept: Vec<usize> = faces.iter().flatten().copied().collect();
        kept.sort_unstable();
        kept.dedup();
        let (lo, hi) = mesh.bounds();
        let pad = 1.0;
        PatchTopology {
            faces,
            kept_vertices: kept,
            region: PatchRegion::Custom {
                boxes: vec![CustomBox {
                    min: [lo[0] - pad, lo[1] - pad, lo[2] - pad],
                    max: [hi[0] + pad, hi[1] + pad, hi[2] + pad],
                }],
            },
        }
    }

    /// Patch faces reindexed into kept-vertex-local indices (for running
    /// geometric losses on the patch alone).
    pub fn local_faces(&self) -> Vec<[usize; 3]> {
        let mut map = vec![usize::MAX; self.kept_vertices.last().map_or(0, |&v| v + 1)];
        for (local, &v) in self.kept_vertices.iter().enumerate() {
            map[v] = local;
        }
        self.faces
            .iter()
            .map(|f| [map[f[0]], map[f[1]], map[f[2]]])
            .collect()
    }
}

/// Extracts the sub-mesh whose faces lie entirely inside the region.
/// The mesh must be in the canonical (untransformed) pose. Errors when the
/// region selects no face.
pub fn extract_patch(mesh: &Mesh, region: &PatchRegion) -> Result<PatchTopology> {
    let inside: Vec<bool> = (0..mesh.n_vertices())
        .map(|v| region.contains(mesh.vertex_position(v)))
        .collect();
    let faces: Vec<[usize; 3]> = mesh
        .faces
        .iter()
        .filter(|f| f.iter().all(|&v| inside[v]))
        .copied()
        .collect();
    if faces.is_empty() {
        return Err(Error::EmptyPatch);
    }
    let mut kept: Vec<usize> = faces.iter().flatten().copied().collect();
    kept.sort_unstable();
    kept.dedup();
    Ok(PatchTopology {
        faces,
        kept_vertices: kept,
        region: region.clone(),
    })
}
