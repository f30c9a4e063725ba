//! Discrete Gaussian curvature as angle defect, plus ball-summed measures.
//!
//! The defect at an interior vertex is 2π minus the sum of incident triangle
//! angles; at a boundary vertex the flat reference angle is π instead. The
//! ball measure at a vertex sums defects over every evaluated vertex whose
//! position lies within a Euclidean distance r (the center included), and the
//! average measure is the mean absolute ball measure over evaluated vertices.
//! With `interior_only` set, boundary vertices are excluded from both the
//! sums and the averages; unreferenced vertices are never evaluated.

use serde::{Deserialize, Serialize};

use super::{dot3, norm3, sub, Mesh};
use crate::error::{Error, Result};

/// Everything the curvature pipeline produces for one mesh and one radius.
/// Excluded vertices (boundary when `interior_only`, or unreferenced) carry
/// zeros in the per-vertex arrays and do not enter `average_measure`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub per_vertex_defect: Vec<f64>,
    pub ball_radius: f64,
    pub per_vertex_ball_measure: Vec<f64>,
    pub average_measure: f64,
    pub interior_only: bool,
}

impl Mesh {
    /// Angle defect at one vertex: 2π − Σ incident angles for interior
    /// vertices, π − Σ for boundary vertices. With `interior_only` a
    /// boundary vertex is an error (callers exclude such vertices); a vertex
    /// with no incident face is always an error.
    pub fn angle_defect(&self, vertex: usize, interior_only: bool) -> Result<f64> {
        if vertex >= self.n_vertices() {
            return Err(Error::dim("vertex index", self.n_vertices(), vertex));
        }
        let incident = self.incident_faces();
        if incident[vertex].is_empty() {
            return Err(Error::IsolatedVertex(vertex));
        }
        let boundary = self.boundary_flags();
        if boundary[vertex] && interior_only {
            return Err(Error::BoundaryVertex(vertex));
        }
        let angle_sum: f64 = incident[vertex]
            .iter()
            .map(|&fi| self.corner_angle(fi, vertex))
            .sum();
        let reference = if boundary[vertex] {
            std::f64::consts::PI
        } else {
            2.0 * std::f64::consts::PI
        };
        Ok(reference - angle_sum)
    }

    /// Interior angle of face `fi` at vertex `at`.
    fn corner_angle(&self, fi: usize, at: usize) -> f64 {
        let f = self.faces[fi];
        let k = f.iter().position(|&v| v == at).expect("vertex not in face");
        let p = self.vertex_position(f[k]);
        let a = self.vertex_position(f[(k + 1) % 3]);
        let b = self.vertex_position(f[(k + 2) % 3]);
        let u = sub(a, p);
        let v = sub(b, p);
        let nu = norm3(u);
        let nv = norm3(v);
        if nu == 0.0 || nv == 0.0 {
            return 0.0;
        }
        let c = (dot3(u, v) / (nu * nv)).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Per-vertex defects and the evaluated-vertex mask in one pass.
    /// Excluded vertices get defect 0.
    fn defects_and_mask(&self, interior_only: bool) -> (Vec<f64>, Vec<bool>) {
        let incident = self.incident_faces();
        let boundary = self.boundary_flags();
        let n = self.n_vertices();
        let mut defect = vec![0.0; n];
        let mut evaluated = vec![false; n];
        for v in 0..n {
            if incident[v].is_empty() || (interior_only && boundary[v]) {
                continue;
            }
            let angle_sum: f64 = incident[v].iter().map(|&fi| self.corner_angle(fi, v)).sum();
            let reference = if boundary[v] {
                std::f64::consts::PI
            } else {
                2.0 * std::f64::consts::PI
            };
            defect[v] = reference - angle_sum;
            evaluated[v] = true;
        }
        (defect, evaluated)
    }

    /// Sum of angle defects over evaluated vertices within Euclidean
    /// distance `r` of the center vertex's position, the center included.
    pub fn curvature_ball_measure(&self, center: usize, r: f64, interior_only: bool) -> Result<f64> {
        if r <= 0.0 {
            return Err(Error::validation("ball_radius", "must be > 0"));
        }
        // Surfaces the same per-vertex errors the defect op would.
        self.angle_defect(center, interior_only)?;
        let (defect, evaluated) = self.defects_and_mask(interior_only);
        let c = self.vertex_position(center);
        let r2 = r * r;
        let mut sum = 0.0;
        for v in 0..self.n_vertices() {
            if !evaluated[v] {
                continue;
            }
            let d = sub(self.vertex_position(v), c);
            if dot3(d, d) <= r2 {
                sum += defect[v];
            }
        }
        Ok(sum)
    }

    /// Mean absolute ball measure over all evaluated vertices.
    pub fn average_curvature(&self, r: f64, interior_only: bool) -> Result<f64> {
        Ok(self.curvature_report(r, interior_only)?.average_measure)
    }

    /// Full curvature evaluation at one radius. O(n²) in the evaluated
    /// vertex count; fine at this crate's mesh sizes.
    pub fn curvature_report(&self, r: f64, interior_only: bool) -> Result<CurvatureReport> {
        if r <= 0.0 {
            return Err(Error::validation("ball_radius", "must be > 0"));
        }
        let (defect, evaluated) = self.defects_and_mask(interior_only);
        let idx: Vec<usize> = (0..self.n_vertices()).filter(|&v| evaluated[v]).collect();
        if idx.is_empty() {
            return Err(Error::EmptyVertexSet);
        }
        let r2 = r * r;
        let mut ball = vec![0.0; self.n_vertices()];
        let mut total_abs = 0.0;
        for &i in &idx {
            let pi = self.vertex_position(i);
            let mut sum = 0.0;
            for &j in &idx {
                let d = sub(self.vertex_position(j), pi);
                if dot3(d, d) <= r2 {
                    sum += defect[j];
                }
            }
            ball[i] = sum;
            total_abs += sum.abs();
        }
        Ok(CurvatureReport {
            per_vertex_defect: defect,
            ball_radius: r,
            per_vertex_ball_measure: ball,
            average_measure: total_abs / idx.len() as f64,
            interior_only,
        })
    }
}
