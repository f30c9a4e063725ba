//! Differentiable renderer: perspective projection, spherical-harmonic
//! shading, hard triangle rasterization, compositing, and an analytic
//! backward pass.
//!
//! The forward pass is deterministic: fixed traversal order, pixel-center
//! sampling, a top-left fill rule on canonicalized windings, and
//! first-face-wins depth ties. Gradients flow through covered pixels only;
//! visibility changes (silhouettes, occlusion flips) carry zero gradient,
//! which the finite-difference harness accounts for by filtering out
//! perturbations that change any pixel's face id.

mod backward;
mod image_io;
mod sh;

pub use backward::{render_backward, RenderGrads};
pub use image_io::{
    load_pgm, load_ppm, load_raw_buffers, save_pgm, save_ppm, save_raw_buffers, RawBuffers,
};
pub use sh::{sh_basis, sh_shade, sh_shading_grad, SH_C0, SH_C1, SH_C2, SH_C20, SH_C22};

use ndarray::{Array1, Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::mesh::{Mesh, PatchTopology};
use crate::morphable::{Coefficients, AMBIENT_GAMMA0, FRONTAL_DISTANCE};
use crate::{Error, Result};

/// Camera and lighting for one render.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    /// Intrinsic X-Y-Z Euler angles (radians), then translation.
    pub pose: [f64; 6],
    /// Nine SH coefficients, bands 0..=2, shared across channels.
    pub illumination: [f64; 9],
    pub image_width: usize,
    pub image_height: usize,
    /// Pinhole focal length in pixels.
    pub focal_length: f64,
    /// Minimum camera-space depth; nearer vertices are clipped.
    pub near_clip: f64,
}

impl RenderParams {
    /// Frontal ambient view of the canonical face.
    pub fn frontal(width: usize, height: usize) -> RenderParams {
        let mut illumination = [0.0; 9];
        illumination[0] = AMBIENT_GAMMA0;
        RenderParams {
            pose: [0.0, 0.0, 0.0, 0.0, 0.0, FRONTAL_DISTANCE],
            illumination,
            image_width: width,
            image_height: height,
            focal_length: 0.9 * width as f64,
            near_clip: 1.0,
        }
    }

    /// Same camera, with pose and illumination taken from coefficients.
    pub fn with_coefficients(mut self, c: &Coefficients) -> RenderParams {
        self.pose = c.pose;
        self.illumination = c.gamma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_width < 8 || self.image_height < 8 {
            return Err(Error::validation(
                "render_params",
                format!(
                    "image dimensions must be at least 8x8, got {}x{}",
                    self.image_width, self.image_height
                ),
            ));
        }
        if !(self.near_clip > 0.0) {
            return Err(Error::validation(
                "render_params",
                format!("near_clip must be positive, got {}", self.near_clip),
            ));
        }
        if !(self.focal_length.is_finite() && self.focal_length > 0.0) {
            return Err(Error::validation(
                "render_params",
                format!("focal_length must be positive, got {}", self.focal_length),
            ));
        }
        let finite = self
            .pose
            .iter()
            .chain(&self.illumination)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::validation("render_params", "non-finite entry"));
        }
        Ok(())
    }
}

/// Forward products the backward pass reuses.
#[derive(Debug, Clone)]
pub(crate) struct RenderCache {
    pub params: RenderParams,
    /// Rendered face subset, global vertex indices; face_id indexes this.
    pub faces: Vec<[usize; 3]>,
    pub cam: Array2<f64>,
    pub screen: Array2<f64>,
    pub valid: Vec<bool>,
    pub raw_normals: Array2<f64>,
    pub normals: Array2<f64>,
    pub shading: Vec<f64>,
    pub shaded: Array2<f64>,
    pub shade_clamp_active: Array2<bool>,
    pub rotation: [[f64; 3]; 3],
}

/// One rendered frame plus the per-pixel buffers the attack needs.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    /// H x W x 3, values in [0, 255], exactly 0 outside the mask.
    pub image: Array3<f64>,
    /// H x W, 1 where a face covers the pixel center.
    pub mask: Array2<u8>,
    /// H x W, index into the rendered face subset, -1 for background.
    pub face_id_buffer: Array2<i32>,
    /// H x W x 3 barycentric weights of the winning face, original order.
    pub barycentric_buffer: Array3<f64>,
    /// H x W camera-space depth of the winning face, +inf for background.
    pub depth_buffer: Array2<f64>,
    pub(crate) cache: RenderCache,
}

/// R = Rx(a) * Ry(b) * Rz(c): intrinsic rotations about the body X, then Y,
/// then Z axes, acting on column vectors.
pub fn euler_rotation(angles: [f64; 3]) -> [[f64; 3]; 3] {
    let (ca, sa) = (angles[0].cos(), angles[0].sin());
    let (cb, sb) = (angles[1].cos(), angles[1].sin());
    let (cc, sc) = (angles[2].cos(), angles[2].sin());
    // Rows of Rx*Ry*Rz, expanded.
    [
        [cb * cc, -cb * sc, sb],
        [
            ca * sc + sa * sb * cc,
            ca * cc - sa * sb * sc,
            -sa * cb,
        ],
        [
            sa * sc - ca * sb * cc,
            sa * cc + ca * sb * sc,
            ca * cb,
        ],
    ]
}

pub(crate) fn mat_vec(m: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
        m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
    ]
}

pub(crate) fn mat_vec_transposed(m: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * p[0] + m[1][0] * p[1] + m[2][0] * p[2],
        m[0][1] * p[0] + m[1][1] * p[1] + m[2][1] * p[2],
        m[0][2] * p[0] + m[1][2] * p[1] + m[2][2] * p[2],
    ]
}

fn camera_transform(positions: ArrayView2<f64>, params: &RenderParams) -> Array2<f64> {
    let rot = euler_rotation([params.pose[0], params.pose[1], params.pose[2]]);
    let t = [params.pose[3], params.pose[4], params.pose[5]];
    let n = positions.nrows();
    let mut cam = Array2::zeros((n, 3));
    for i in 0..n {
        let p = [positions[[i, 0]], positions[[i, 1]], positions[[i, 2]]];
        let q = mat_vec(&rot, p);
        for k in 0..3 {
            cam[[i, k]] = q[k] + t[k];
        }
    }
    cam
}

/// Pinhole perspective: rotate, translate, then
/// (u, v) = focal * (x/z, y/z) + (W/2, H/2). depth = camera-space z.
/// Vertices at or behind z = 0 get screen (0, 0); faces touching vertices
/// with depth <= near_clip are culled by the rasterizer.
pub fn project(positions: ArrayView2<f64>, params: &RenderParams) -> (Array2<f64>, Array1<f64>) {
    let cam = camera_transform(positions, params);
    let n = cam.nrows();
    let (cx, cy) = (
        params.image_width as f64 / 2.0,
        params.image_height as f64 / 2.0,
    );
    let mut screen = Array2::zeros((n, 2));
    let mut depth = Array1::zeros(n);
    for i in 0..n {
        let z = cam[[i, 2]];
        depth[i] = z;
        if z != 0.0 {
            screen[[i, 0]] = params.focal_length * cam[[i, 0]] / z + cx;
            screen[[i, 1]] = params.focal_length * cam[[i, 1]] / z + cy;
        }
    }
    (screen, depth)
}

/// Area-weighted vertex normals in model space: each face accumulates its
/// edge cross product (magnitude 2x area) onto its three vertices. Returns
/// (raw sums, unit normals); rows with no incident face are zero in both.
pub fn area_weighted_normals(mesh: &Mesh) -> (Array2<f64>, Array2<f64>) {
    let n = mesh.n_vertices();
    let mut raw = Array2::zeros((n, 3));
    for f in &mesh.faces {
        let a = mesh.vertex_position(f[0]);
        let b = mesh.vertex_position(f[1]);
        let c = mesh.vertex_position(f[2]);
        let e1 = crate::mesh::sub(b, a);
        let e2 = crate::mesh::sub(c, a);
        let fnorm = crate::mesh::cross3(e1, e2);
        for &v in f {
            for k in 0..3 {
                raw[[v, k]] += fnorm[k];
            }
        }
    }
    let mut unit = Array2::zeros((n, 3));
    for i in 0..n {
        let r = [raw[[i, 0]], raw[[i, 1]], raw[[i, 2]]];
        let len = crate::mesh::norm3(r);
        if len > 1e-12 {
            for k in 0..3 {
                unit[[i, k]] = r[k] / len;
            }
        }
    }
    (raw, unit)
}

fn cross2(ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    ax * by - ay * bx
}

/// Top-left tie rule for a pixel center exactly on a directed edge d:
/// exactly one of d, -d counts the boundary as covered.
fn plus_edge(du: f64, dv: f64) -> bool {
    dv < 0.0 || (dv == 0.0 && du > 0.0)
}

/// Rasterizes the topology's faces. For each pixel center the nearest
/// covering face wins (affine depth interpolation, first face wins exact
/// ties); colors are barycentric blends of per-vertex shaded colors.
pub fn rasterize(mesh: &Mesh, topology: &PatchTopology, params: &RenderParams) -> Result<RenderOutput> {
    params.validate()?;
    if topology.faces.is_empty() {
        return Err(Error::EmptyPatch);
    }
    let n = mesh.n_vertices();
    for f in &topology.faces {
        if f.iter().any(|&v| v >= n) {
            return Err(Error::dim("topology vertex index", format!("< {n}"), format!("{f:?}")));
        }
    }

    let cam = camera_transform(mesh.positions.view(), params);
    let rotation = euler_rotation([params.pose[0], params.pose[1], params.pose[2]]);
    let (w, h) = (params.image_width, params.image_height);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut screen = Array2::zeros((n, 2));
    let mut valid = vec![false; n];
    for i in 0..n {
        let z = cam[[i, 2]];
        valid[i] = z > params.near_clip;
        if z != 0.0 {
            screen[[i, 0]] = params.focal_length * cam[[i, 0]] / z + cx;
            screen[[i, 1]] = params.focal_length * cam[[i, 1]] / z + cy;
        }
    }

    let (raw_normals, normals) = area_weighted_normals(mesh);
    let shading = sh_shade(normals.view(), &params.illumination);
    let mut shaded = Array2::zeros((n, 3));
    let mut shade_clamp_active = Array2::from_elem((n, 3), false);
    for i in 0..n {
        for k in 0..3 {
            let pre = mesh.colors[[i, k]] * shading[i];
            if pre < 0.0 || pre > 255.0 {
                shade_clamp_active[[i, k]] = true;
            }
            shaded[[i, k]] = pre.clamp(0.0, 255.0);
        }
    }

    let mut image = Array3::zeros((h, w, 3));
    let mut mask = Array2::zeros((h, w));
    let mut face_id_buffer = Array2::from_elem((h, w), -1i32);
    let mut barycentric_buffer = Array3::zeros((h, w, 3));
    let mut depth_buffer = Array2::from_elem((h, w), f64::INFINITY);

    for (fid, f) in topology.faces.iter().enumerate() {
        if f.iter().any(|&v| !valid[v]) {
            continue;
        }
        let s = [
            [screen[[f[0], 0]], screen[[f[0], 1]]],
            [screen[[f[1], 0]], screen[[f[1], 1]]],
            [screen[[f[2], 0]], screen[[f[2], 1]]],
        ];
        let area2 = cross2(s[1][0] - s[0][0], s[1][1] - s[0][1], s[2][0] - s[0][0], s[2][1] - s[0][1]);
        if area2 == 0.0 {
            continue;
        }
        // Canonical orientation: positive area. Swapping the last two
        // vertices flips the sign without changing the triangle.
        let order: [usize; 3] = if area2 > 0.0 { [0, 1, 2] } else { [0, 2, 1] };
        let v = [s[order[0]], s[order[1]], s[order[2]]];
        let area = area2.abs();
        let z = [
            cam[[f[order[0]], 2]],
            cam[[f[order[1]], 2]],
            cam[[f[order[2]], 2]],
        ];

        let umin = v[0][0].min(v[1][0]).min(v[2][0]);
        let umax = v[0][0].max(v[1][0]).max(v[2][0]);
        let vmin = v[0][1].min(v[1][1]).min(v[2][1]);
        let vmax = v[0][1].max(v[1][1]).max(v[2][1]);
        // Pixel (r, c) has center (c + 0.5, r + 0.5).
        let c0 = ((umin - 0.5).ceil().max(0.0)) as usize;
        let c1 = (umax - 0.5).floor().min(w as f64 - 1.0);
        let r0 = ((vmin - 0.5).ceil().max(0.0)) as usize;
        let r1 = (vmax - 0.5).floor().min(h as f64 - 1.0);
        if c1 < 0.0 || r1 < 0.0 {
            continue;
        }
        let (c1, r1) = (c1 as usize, r1 as usize);

        for r in r0..=r1 {
            let py = r as f64 + 0.5;
            for c in c0..=c1 {
                let px = c as f64 + 0.5;
                // Edge functions of the canonical winding; e[k] spans the
                // edge from vertex k to vertex k+1.
                let mut covered = true;
                let mut e = [0.0; 3];
                for k in 0..3 {
                    let a = v[k];
                    let b = v[(k + 1) % 3];
                    let (du, dv) = (b[0] - a[0], b[1] - a[1]);
                    let ek = cross2(du, dv, px - a[0], py - a[1]);
                    if ek < 0.0 || (ek == 0.0 && !plus_edge(du, dv)) {
                        covered = false;
                        break;
                    }
                    e[k] = ek;
                }
                if !covered {
                    continue;
                }
                // Canonical barycentric weights: vertex k is opposite e[k+1].
                let wts = [e[1] / area, e[2] / area, e[0] / area];
                let depth = wts[0] * z[0] + wts[1] * z[1] + wts[2] * z[2];
                if depth >= depth_buffer[[r, c]] {
                    continue;
                }
                depth_buffer[[r, c]] = depth;
                face_id_buffer[[r, c]] = fid as i32;
                mask[[r, c]] = 1;
                // Store weights in the face's original vertex order.
                let mut worig = [0.0; 3];
                for k in 0..3 {
                    worig[order[k]] = wts[k];
                }
                for k in 0..3 {
                    barycentric_buffer[[r, c, k]] = worig[k];
                }
                for ch in 0..3 {
                    image[[r, c, ch]] = worig[0] * shaded[[f[0], ch]]
                        + worig[1] * shaded[[f[1], ch]]
                        + worig[2] * shaded[[f[2], ch]];
                }
            }
        }
    }

    Ok(RenderOutput {
        image,
        mask,
        face_id_buffer,
        barycentric_buffer,
        depth_buffer,
        cache: RenderCache {
            params: params.clone(),
            faces: topology.faces.clone(),
            cam,
            screen,
            valid,
            raw_normals,
            normals,
            shading,
            shaded,
            shade_clamp_active,
            rotation,
        },
    })
}

/// x* = M (.) x^r + (1 - M) (.) x^a, as an exact per-pixel copy so that an
/// all-zero mask returns the attacker image bit for bit.
pub fn composite(render: &RenderOutput, attacker_image: &Array3<f64>) -> Result<Array3<f64>> {
    if attacker_image.dim() != render.image.dim() {
        return Err(Error::dim(
            "attacker image shape",
            format!("{:?}", render.image.dim()),
            format!("{:?}", attacker_image.dim()),
        ));
    }
    let mut out = attacker_image.clone();
    let (h, w, _) = out.dim();
    for r in 0..h {
        for c in 0..w {
            if render.mask[[r, c]] == 1 {
                for ch in 0..3 {
                    out[[r, c, ch]] = render.image[[r, c, ch]];
                }
            }
        }
    }
    Ok(out)
}

/// Upstream-composite gradient restricted to rendered pixels:
/// dL/dx^r = M (.) dL/dx*.
pub fn composite_backward(render: &RenderOutput, dl_dcomposite: &Array3<f64>) -> Result<Array3<f64>> {
    if dl_dcomposite.dim() != render.image.dim() {
        return Err(Error::dim(
            "composite gradient shape",
            format!("{:?}", render.image.dim()),
            format!("{:?}", dl_dcomposite.dim()),
        ));
    }
    let mut out = Array3::zeros(dl_dcomposite.dim());
    let (h, w, _) = out.dim();
    for r in 0..h {
        for c in 0..w {
            if render.mask[[r, c]] == 1 {
                for ch in 0..3 {
                    out[[r, c, ch]] = dl_dcomposite[[r, c, ch]];
                }
            }
        }
    }
    Ok(out)
}

/// Renders an identity end to end: synthesize coefficients, pose the
/// camera from them, rasterize every face.
pub fn render_face(
    model: &crate::morphable::MorphableModel,
    c: &Coefficients,
    base: &RenderParams,
) -> Result<RenderOutput> {
    let mesh = model.synth_mesh(c)?;
    let topo = PatchTopology::full(&mesh);
    let params = base.clone().with_coefficients(c);
    rasterize(&mesh, &topo, &params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::PatchRegion;
    use crate::rng::{normal, seeded, uniform, Prng};
    use approx::assert_abs_diff_eq;

    fn tri_mesh(verts: &[[f64; 3]], colors: &[[f64; 3]], faces: Vec<[usize; 3]>) -> Mesh {
        let n = verts.len();
        let mut p = Array2::zeros((n, 3));
        let mut col = Array2::zeros((n, 3));
        for i in 0..n {
            for k in 0..3 {
                p[[i, k]] = verts[i][k];
                col[[i, k]] = colors[i][k];
            }
        }
        Mesh::new(p, col, faces).unwrap()
    }

    fn ambient_params(w: usize, h: usize, focal: f64) -> RenderParams {
        let mut p = RenderParams::frontal(w, h);
        p.pose = [0.0; 6]; // scene vertices already in camera space
        p.focal_length = focal;
        p
    }

    /// Random triangles inside the view frustum, for oracle comparisons.
    fn random_scene(rng: &mut Prng, k: usize, w: usize, _h: usize, focal: f64) -> Mesh {
        let mut verts = Vec::new();
        let mut colors = Vec::new();
        let mut faces = Vec::new();
        for t in 0..k {
            let zc = uniform(rng, 8.0, 24.0);
            let half = zc * (w as f64 / 2.0) / focal;
            let cx = uniform(rng, -half * 0.6, half * 0.6);
            let cy = uniform(rng, -half * 0.6, half * 0.6);
            for _ in 0..3 {
                verts.push([
                    cx + normal(rng) * half * 0.4,
                    cy + normal(rng) * half * 0.4,
                    zc + normal(rng) * 1.5,
                ]);
                colors.push([
                    uniform(rng, 10.0, 245.0),
                    uniform(rng, 10.0, 245.0),
                    uniform(rng, 10.0, 245.0),
                ]);
            }
            faces.push([3 * t, 3 * t + 1, 3 * t + 2]);
        }
        tri_mesh(&verts, &colors, faces)
    }

    /// Brute-force reference: for every pixel, test every face with the
    /// same edge functions (no bounding box, no streaming depth test),
    /// sort candidates by (depth, face order), take the first.
    fn oracle_rasterize(mesh: &Mesh, topo: &PatchTopology, params: &RenderParams) -> RenderOutput {
        let mut out = rasterize(mesh, topo, params).unwrap();
        // Rebuild every per-pixel buffer from scratch.
        let (h, w) = (params.image_height, params.image_width);
        let cam = camera_transform(mesh.positions.view(), params);
        let (screen, _depth) = project(mesh.positions.view(), params);
        let n = mesh.n_vertices();
        let valid: Vec<bool> = (0..n).map(|i| cam[[i, 2]] > params.near_clip).collect();
        let (_raw, normals) = area_weighted_normals(mesh);
        let shading = sh_shade(normals.view(), &params.illumination);
        let mut shaded = Array2::zeros((n, 3));
        for i in 0..n {
            for k in 0..3 {
                shaded[[i, k]] = (mesh.colors[[i, k]] * shading[i]).clamp(0.0, 255.0);
            }
        }
        let mut image = Array3::zeros((h, w, 3));
        let mut mask = Array2::zeros((h, w));
        let mut fid_buf = Array2::from_elem((h, w), -1i32);
        let mut bary = Array3::zeros((h, w, 3));
        let mut depth_buf = Array2::from_elem((h, w), f64::INFINITY);
        for r in 0..h {
            for c in 0..w {
                let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
                let mut candidates: Vec<(f64, usize, [f64; 3])> = Vec::new();
                for (fid, f) in topo.faces.iter().enumerate() {
                    if f.iter().any(|&v| !valid[v]) {
                        continue;
                    }
                    let s: Vec<[f64; 2]> = f
                        .iter()
                        .map(|&v| [screen[[v, 0]], screen[[v, 1]]])
                        .collect();
                    let a2 = cross2(
                        s[1][0] - s[0][0],
                        s[1][1] - s[0][1],
                        s[2][0] - s[0][0],
                        s[2][1] - s[0][1],
                    );
                    if a2 == 0.0 {
                        continue;
                    }
                    let order: [usize; 3] = if a2 > 0.0 { [0, 1, 2] } else { [0, 2, 1] };
                    let v = [s[order[0]], s[order[1]], s[order[2]]];
                    let mut inside = true;
                    let mut e = [0.0; 3];
                    for k in 0..3 {
                        let (a, b) = (v[k], v[(k + 1) % 3]);
                        let (du, dv) = (b[0] - a[0], b[1] - a[1]);
                        let ek = cross2(du, dv, px - a[0], py - a[1]);
                        if ek < 0.0 || (ek == 0.0 && !plus_edge(du, dv)) {
                            inside = false;
                            break;
                        }
                        e[k] = ek;
                    }
                    if !inside {
                        continue;
                    }
                    let area = a2.abs();
                    let wts = [e[1] / area, e[2] / area, e[0] / area];
                    let depth = wts[0] * cam[[f[order[0]], 2]]
                        + wts[1] * cam[[f[order[1]], 2]]
                        + wts[2] * cam[[f[order[2]], 2]];
                    let mut worig = [0.0; 3];
                    for k in 0..3 {
                        worig[order[k]] = wts[k];
                    }
                    candidates.push((depth, fid, worig));
                }
                if candidates.is_empty() {
                    continue;
                }
                candidates.sort_by(|x, y| {
                    x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1))
                });
                let (depth, fid, worig) = candidates[0];
                depth_buf[[r, c]] = depth;
                fid_buf[[r, c]] = fid as i32;
                mask[[r, c]] = 1;
                let f = topo.faces[fid];
                for k in 0..3 {
                    bary[[r, c, k]] = worig[k];
                }
                for ch in 0..3 {
                    image[[r, c, ch]] = worig[0] * shaded[[f[0], ch]]
                        + worig[1] * shaded[[f[1], ch]]
                        + worig[2] * shaded[[f[2], ch]];
                }
            }
        }
        out.image = image;
        out.mask = mask;
        out.face_id_buffer = fid_buf;
        out.barycentric_buffer = bary;
        out.depth_buffer = depth_buf;
        out
    }

    #[test]
    fn on_axis_vertex_projects_to_image_center() {
        let params = ambient_params(32, 24, 20.0);
        let mut pos = Array2::zeros((1, 3));
        pos[[0, 2]] = 10.0;
        let (screen, depth) = project(pos.view(), &params);
        assert_eq!(screen[[0, 0]], 16.0);
        assert_eq!(screen[[0, 1]], 12.0);
        assert_eq!(depth[0], 10.0);
    }

    #[test]
    fn doubling_focal_doubles_centered_coordinates() {
        let mut rng = seeded(3);
        let params = ambient_params(32, 32, 15.0);
        let mut params2 = params.clone();
        params2.focal_length = 30.0;
        let pos = Array2::from_shape_fn((20, 3), |(_, k)| {
            if k == 2 {
                8.0 + normal(&mut rng).abs()
            } else {
                normal(&mut rng) * 3.0
            }
        });
        let (s1, _) = project(pos.view(), &params);
        let (s2, _) = project(pos.view(), &params2);
        for i in 0..20 {
            for k in 0..2 {
                let c1 = s1[[i, k]] - 16.0;
                let c2 = s2[[i, k]] - 16.0;
                assert_abs_diff_eq!(c2, 2.0 * c1, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn projection_matches_independent_formula() {
        let mut rng = seeded(9);
        let mut params = ambient_params(48, 40, 33.0);
        params.pose = [0.31, -0.22, 0.15, 0.4, -0.7, 18.0];
        let pos = Array2::from_shape_fn((30, 3), |_| normal(&mut rng) * 4.0);
        let (screen, depth) = project(pos.view(), &params);
        // Independent formulation: quaternion-free explicit per-axis
        // rotations applied one at a time, in intrinsic X-Y-Z order
        // (matrix product Rx*Ry*Rz means Rz is applied to the vector first).
        let rot_x = |p: [f64; 3], t: f64| {
            [
                p[0],
                t.cos() * p[1] - t.sin() * p[2],
                t.sin() * p[1] + t.cos() * p[2],
            ]
        };
        let rot_y = |p: [f64; 3], t: f64| {
            [
                t.cos() * p[0] + t.sin() * p[2],
                p[1],
                -t.sin() * p[0] + t.cos() * p[2],
            ]
        };
        let rot_z = |p: [f64; 3], t: f64| {
            [
                t.cos() * p[0] - t.sin() * p[1],
                t.sin() * p[0] + t.cos() * p[1],
                p[2],
            ]
        };
        for i in 0..30 {
            let p = [pos[[i, 0]], pos[[i, 1]], pos[[i, 2]]];
            let q = rot_x(rot_y(rot_z(p, 0.15), -0.22), 0.31);
            let cam = [q[0] + 0.4, q[1] - 0.7, q[2] + 18.0];
            let u = 33.0 * cam[0] / cam[2] + 24.0;
            let v = 33.0 * cam[1] / cam[2] + 20.0;
            assert_abs_diff_eq!(screen[[i, 0]], u, epsilon = 1e-9);
            assert_abs_diff_eq!(screen[[i, 1]], v, epsilon = 1e-9);
            assert_abs_diff_eq!(depth[i], cam[2], epsilon = 1e-9);
        }
    }

    #[test]
    fn full_frame_triangle_gives_constant_image() {
        let c = [120.0, 80.0, 40.0];
        let mesh = tri_mesh(
            &[[-60.0, -60.0, 10.0], [60.0, -30.0, 10.0], [-30.0, 60.0, 10.0]],
            &[c, c, c],
            vec![[0, 1, 2]],
        );
        let params = ambient_params(16, 16, 10.0);
        let out = rasterize(&mesh, &PatchTopology::full(&mesh), &params).unwrap();
        assert!(out.mask.iter().all(|&m| m == 1));
        for r in 0..16 {
            for ccol in 0..16 {
                for ch in 0..3 {
                    assert_abs_diff_eq!(out.image[[r, ccol, ch]], c[ch], epsilon = 1e-9);
                }
            }
        }
        // Full coverage: barycentric rows sum to one.
        for r in 0..16 {
            for ccol in 0..16 {
                let s: f64 = (0..3).map(|k| out.barycentric_buffer[[r, ccol, k]]).sum();
                assert_abs_diff_eq!(s, 1.0, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn nearer_triangle_wins_overlap() {
        let red = [200.0, 0.0, 0.0];
        let blue = [0.0, 0.0, 200.0];
        let mesh = tri_mesh(
            &[
                [-50.0, -50.0, 20.0],
                [50.0, -50.0, 20.0],
                [0.0, 70.0, 20.0],
                [-50.0, -50.0, 12.0],
                [50.0, -50.0, 12.0],
                [0.0, 70.0, 12.0],
            ],
            &[red, red, red, blue, blue, blue],
            vec![[0, 1, 2], [3, 4, 5]],
        );
        let params = ambient_params(16, 16, 8.0);
        let out = rasterize(&mesh, &PatchTopology::full(&mesh), &params).unwrap();
        let center = [out.image[[8, 8, 0]], out.image[[8, 8, 1]], out.image[[8, 8, 2]]];
        assert_abs_diff_eq!(center[2], 200.0, epsilon = 1e-9);
        assert_abs_diff_eq!(center[0], 0.0, epsilon = 1e-9);
        assert_eq!(out.face_id_buffer[[8, 8]], 1);
    }

    #[test]
    fn matches_bruteforce_oracle_on_random_scenes() {
        let mut rng = seeded(41);
        for scene in 0..20 {
            let mesh = random_scene(&mut rng, 10, 16, 16, 12.0);
            let mut params = ambient_params(16, 16, 12.0);
            params.illumination = [
                AMBIENT_GAMMA0 * 0.9,
                0.1,
                -0.2,
                0.15,
                0.0,
                0.05,
                -0.1,
                0.0,
                0.08,
            ];
            let topo = PatchTopology::full(&mesh);
            let ours = rasterize(&mesh, &topo, &params).unwrap();
            let oracle = oracle_rasterize(&mesh, &topo, &params);
            assert_eq!(ours.mask, oracle.mask, "scene {scene}: mask");
            assert_eq!(
                ours.face_id_buffer, oracle.face_id_buffer,
                "scene {scene}: face ids"
            );
            assert_eq!(ours.image, oracle.image, "scene {scene}: image");
            assert_eq!(
                ours.barycentric_buffer, oracle.barycentric_buffer,
                "scene {scene}: barycentric"
            );
            assert_eq!(ours.depth_buffer, oracle.depth_buffer, "scene {scene}: depth");
        }
    }

    #[test]
    fn quad_matches_oracle_and_mask_invariants_hold() {
        let g = [90.0, 140.0, 190.0];
        let mesh = tri_mesh(
            &[
                [-6.0, -6.0, 12.0],
                [6.0, -6.0, 12.0],
                [6.0, 6.0, 12.0],
                [-6.0, 6.0, 12.0],
            ],
            &[g, g, g, g],
            vec![[0, 1, 2], [0, 2, 3]],
        );
        let params = ambient_params(16, 16, 10.0);
        let topo = PatchTopology::full(&mesh);
        let ours = rasterize(&mesh, &topo, &params).unwrap();
        let oracle = oracle_rasterize(&mesh, &topo, &params);
        assert_eq!(ours.mask, oracle.mask);
        assert_eq!(ours.image, oracle.image);
        for r in 0..16 {
            for c in 0..16 {
                let m = ours.mask[[r, c]];
                assert_eq!(m == 1, ours.face_id_buffer[[r, c]] >= 0);
                if m == 0 {
                    for ch in 0..3 {
                        assert_eq!(ours.image[[r, c, ch]], 0.0);
                    }
                } else {
                    let s: f64 = (0..3).map(|k| ours.barycentric_buffer[[r, c, k]]).sum();
                    assert_abs_diff_eq!(s, 1.0, epsilon = 1e-6);
                    for k in 0..3 {
                        assert!(ours.barycentric_buffer[[r, c, k]] >= 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn shared_edge_pixels_claimed_exactly_once() {
        // The shared edge is vertical at screen u = 8.5: with focal 10 and
        // z = 10, screen u = x + 8, so x = 0.5 puts edge pixels exactly on
        // pixel centers.
        let g = [100.0, 100.0, 100.0];
        let verts = [
            [0.5, -7.0, 10.0],
            [0.5, 7.0, 10.0],
            [-6.0, 0.0, 10.0],
            [7.0, 0.0, 10.0],
        ];
        let mesh = tri_mesh(
            &verts,
            &[g, g, g, g],
            vec![[0, 1, 2], [1, 0, 3]],
        );
        let params = ambient_params(16, 16, 10.0);
        let left = rasterize(
            &mesh,
            &PatchTopology {
                faces: vec![[0, 1, 2]],
                kept_vertices: vec![0, 1, 2],
                region: PatchRegion::Eye,
            },
            &params,
        )
        .unwrap();
        let right = rasterize(
            &mesh,
            &PatchTopology {
                faces: vec![[1, 0, 3]],
                kept_vertices: vec![0, 1, 3],
                region: PatchRegion::Eye,
            },
            &params,
        )
        .unwrap();
        let both = rasterize(&mesh, &PatchTopology::full(&mesh), &params).unwrap();
        let mut on_edge = 0;
        for r in 0..16 {
            for c in 0..16 {
                let l = left.mask[[r, c]];
                let rr = right.mask[[r, c]];
                assert!(l + rr <= 1, "double claim at ({r},{c})");
                assert_eq!(both.mask[[r, c]], l | rr);
                if c == 8 && (l | rr) == 1 {
                    on_edge += 1;
                }
            }
        }
        assert!(on_edge > 0, "edge column never covered");
    }

    #[test]
    fn behind_camera_faces_are_culled() {
        let g = [100.0, 100.0, 100.0];
        let mesh = tri_mesh(
            &[
                [-5.0, -5.0, 10.0],
                [5.0, -5.0, 10.0],
                [0.0, 5.0, 0.5], // in front of near_clip = 1
                [-5.0, -5.0, 12.0],
                [5.0, -5.0, 12.0],
                [0.0, 5.0, 12.0],
            ],
            &[g, g, g, g, g, g],
            vec![[0, 1, 2], [3, 4, 5]],
        );
        let params = ambient_params(16, 16, 10.0);
        let out = rasterize(&mesh, &PatchTopology::full(&mesh), &params).unwrap();
        // Only the second face can appear.
        for v in out.face_id_buffer.iter() {
            assert!(*v == -1 || *v == 1);
        }
        assert!(out.mask.iter().any(|&m| m == 1));
    }

    #[test]
    fn composite_identities() {
        let mut rng = seeded(17);
        let mesh = random_scene(&mut rng, 4, 16, 16, 12.0);
        let params = ambient_params(16, 16, 12.0);
        let out = rasterize(&mesh, &PatchTopology::full(&mesh), &params).unwrap();
        let attacker = Array3::from_shape_fn((16, 16, 3), |_| uniform(&mut rng, 0.0, 255.0));

        // All-zero mask: identity on the attacker image, bit-exact.
        let mut zero_mask = out.clone();
        zero_mask.mask.fill(0);
        let blended = composite(&zero_mask, &attacker).unwrap();
        assert_eq!(blended, attacker);

        // All-ones mask: returns the render.
        let mut one_mask = out.clone();
        one_mask.mask.fill(1);
        let blended = composite(&one_mask, &attacker).unwrap();
        assert_eq!(blended, one_mask.image);

        // Checkerboard: per-pixel selection matches the formula.
        let mut checker = out.clone();
        for r in 0..16 {
            for c in 0..16 {
                checker.mask[[r, c]] = ((r + c) % 2) as u8;
            }
        }
        let blended = composite(&checker, &attacker).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                for ch in 0..3 {
                    let m = checker.mask[[r, c]] as f64;
                    let want = m * checker.image[[r, c, ch]] + (1.0 - m) * attacker[[r, c, ch]];
                    assert_eq!(blended[[r, c, ch]], want);
                }
            }
        }

        // Dimension mismatch errors out.
        let small = Array3::zeros((8, 8, 3));
        assert!(matches!(
            composite(&out, &small),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rasterize_is_deterministic() {
        let mut rng = seeded(29);
        let mesh = random_scene(&mut rng, 10, 24, 24, 15.0);
        let params = ambient_params(24, 24, 15.0);
        let topo = PatchTopology::full(&mesh);
        let a = rasterize(&mesh, &topo, &params).unwrap();
        let b = rasterize(&mesh, &topo, &params).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.face_id_buffer, b.face_id_buffer);
        assert_eq!(a.barycentric_buffer, b.barycentric_buffer);
        assert_eq!(a.depth_buffer, b.depth_buffer);
    }

    #[test]
    fn params_validation_rejects_bad_inputs() {
        let mut p = RenderParams::frontal(4, 32);
        assert!(p.validate().is_err());
        p = RenderParams::frontal(32, 32);
        p.near_clip = 0.0;
        assert!(p.validate().is_err());
        p = RenderParams::frontal(32, 32);
        p.focal_length = -1.0;
        assert!(p.validate().is_err());
        assert!(RenderParams::frontal(32, 32).validate().is_ok());
    }

    #[test]
    fn empty_topology_is_rejected() {
        let g = [1.0, 2.0, 3.0];
        let mesh = tri_mesh(
            &[[0.0, 0.0, 5.0], [1.0, 0.0, 5.0], [0.0, 1.0, 5.0]],
            &[g, g, g],
            vec![[0, 1, 2]],
        );
        let topo = PatchTopology {
            faces: vec![],
            kept_vertices: vec![],
            region: PatchRegion::Eye,
        };
        assert!(matches!(
            rasterize(&mesh, &topo, &ambient_params(16, 16, 10.0)),
            Err(Error::EmptyPatch)
        ));
    }

    #[test]
    fn canonical_face_renders_frontally() {
        let model = crate::morphable::generate_synthetic_model(5, 24).unwrap();
        let ident = crate::morphable::sample_identity(&model, 3);
        let params = RenderParams::frontal(32, 32);
        let out = render_face(&model, &ident, &params).unwrap();
        let covered = out.mask.iter().filter(|&&m| m == 1).count();
        assert!(covered > 200, "covered {covered} of 1024");
        // Rendered colors live inside the valid range.
        assert!(out
            .image
            .iter()
            .all(|&v| (0.0..=255.0).contains(&v) && v.is_finite()));
    }
}
