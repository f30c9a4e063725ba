//! Procedural test meshes: flat grids, cubes, tetrahedra, icospheres.
//! Used by unit tests, gradient checks, and the CLI demos. All carry a
//! uniform mid-gray color.

use std::collections::BTreeMap;

use ndarray::Array2;

use super::Mesh;

fn gray(n: usize) -> Array2<f64> {
    Array2::from_elem((n, 3), 128.0)
}

/// rows×cols planar grid in the z = 0 plane, consistently diagonal-split.
/// Interior vertices are flat (angle defect 0).
pub fn flat_grid(rows: usize, cols: usize, spacing: f64) -> Mesh {
    assert!(rows >= 2 && cols >= 2);
    let mut positions = Array2::zeros((rows * cols, 3));
    for r in 0..rows {
        for c in 0..cols {
            let v = r * cols + c;
            positions[[v, 0]] = c as f64 * spacing;
            positions[[v, 1]] = r as f64 * spacing;
        }
    }
    let mut faces = Vec::with_capacity(2 * (rows - 1) * (cols - 1));
    for r in 0..rows - 1 {
        for c in 0..cols - 1 {
            let a = r * cols + c;
            let b = r * cols + c + 1;
            let d = (r + 1) * cols + c;
            let e = (r + 1) * cols + c + 1;
            faces.push([a, b, e]);
            faces.push([a, e, d]);
        }
    }
    Mesh::new(positions, gray(rows * cols), faces).expect("grid is valid")
}

/// Closed axis-aligned cube centered at the origin, 12 triangles.
/// Every corner has total incident angle 3π/2, so the angle defect is π/2.
pub fn cube(edge: f64) -> Mesh {
    let h = edge / 2.0;
    let corners = [
        [-h, -h, -h], // 0
        [h, -h, -h],  // 1
        [h, h, -h],   // 2
        [-h, h, -h],  // 3
        [-h, -h, h],  // 4
        [h, -h, h],   // 5
        [h, h, h],    // 6
        [-h, h, h],   // 7
    ];
    let mut positions = Array2::zeros((8, 3));
    for (i, c) in corners.iter().enumerate() {
        for k in 0..3 {
            positions[[i, k]] = c[k];
        }
    }
    // Outward-wound quads, each split along one diagonal.
    let quads = [
        [0, 3, 2, 1], // z = -h
        [4, 5, 6, 7], // z = +h
        [0, 1, 5, 4], // y = -h
        [2, 3, 7, 6], // y = +h
        [1, 2, 6, 5], // x = +h
        [0, 4, 7, 3], // x = -h
    ];
    let mut faces = Vec::with_capacity(12);
    for q in quads {
        faces.push([q[0], q[1], q[2]]);
        faces.push([q[0], q[2], q[3]]);
    }
    Mesh::new(positions, gray(8), faces).expect("cube is valid")
}

/// Closed regular tetrahedron with the given edge length.
/// At each vertex three equilateral angles meet: defect 2π − 3·(π/3) = π.
pub fn tetrahedron(edge: f64) -> Mesh {
    // Alternating-sign corners of a cube are pairwise 2*sqrt(2)*s apart.
    let s = edge / 8.0f64.sqrt();
    let verts = [
        [s, s, s],
        [s, -s, -s],
        [-s, s, -s],
        [-s, -s, s],
    ];
    let mut positions = Array2::zeros((4, 3));
    for (i, v) in verts.iter().enumerate() {
        for k in 0..3 {
            positions[[i, k]] = v[k];
        }
    }
    let faces = vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]];
    Mesh::new(positions, gray(4), faces).expect("tetrahedron is valid")
}

/// Closed genus-0 sphere: an icosahedron subdivided `subdivisions` times,
/// vertices projected to the given radius. Midpoints are deduplicated so the
/// result is watertight (Gauss–Bonnet: total angle defect 4π).
pub fn icosphere(subdivisions: usize, radius: f64) -> Mesh {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut verts: Vec<[f64; 3]> = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0usize; 3];
            for (k, (a, b)) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])].into_iter().enumerate() {
                let key = (a.min(b), a.max(b));
                mid[k] = *midpoint.entry(key).or_insert_with(|| {
                    let m = [
                        (verts[a][0] + verts[b][0]) / 2.0,
                        (verts[a][1] + verts[b][1]) / 2.0,
                        (verts[a][2] + verts[b][2]) / 2.0,
                    ];
                    verts.push(m);
                    verts.len() - 1
                });
            }
            next.push([f[0], mid[0], mid[2]]);
            next.push([f[1], mid[1], mid[0]]);
            next.push([f[2], mid[2], mid[1]]);
            next.push([mid[0], mid[1], mid[2]]);
        }
        faces = next;
    }
    let mut positions = Array2::zeros((verts.len(), 3));
    for (i, v) in verts.iter().enumerate() {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        for k in 0..3 {
            positions[[i, k]] = v[k] / n * radius;
        }
    }
    let n = verts.len();
    Mesh::new(positions, gray(n), faces).expect("icosphere is valid")
}
