//! Analytic backward pass through the renderer.
//!
//! Gradients flow through covered pixels only. Per pixel, the image value
//! is a barycentric blend of shaded vertex colors; the chain splits into a
//! color/shading branch (through the SH basis and vertex normals, all in
//! model space) and a geometric branch (barycentric weights as ratios of
//! signed areas of projected vertices, chained through the pinhole
//! projection and the pose rotation). Visibility is treated as locally
//! constant: mask boundaries, face-id flips, and depth-test ties carry
//! zero gradient by definition.

use ndarray::{Array2, Array3};

use super::sh::{sh_basis, sh_shading_grad};
use super::{mat_vec_transposed, RenderOutput, RenderParams};
use crate::mesh::{cross3, norm3, sub, Mesh};
use crate::{Error, Result};

/// Gradients with respect to the forward inputs.
#[derive(Debug, Clone)]
pub struct RenderGrads {
    pub positions: Array2<f64>,
    pub colors: Array2<f64>,
    pub gamma: [f64; 9],
}

/// Backpropagates dL/dimage to vertex positions, vertex colors, and the
/// illumination coefficients. `mesh` and `params` must be the exact inputs
/// of the forward call that produced `output`.
pub fn render_backward(
    output: &RenderOutput,
    mesh: &Mesh,
    params: &RenderParams,
    dl_dimage: &Array3<f64>,
) -> Result<RenderGrads> {
    let cache = &output.cache;
    if *params != cache.params {
        return Err(Error::validation(
            "render_backward",
            "params do not match the forward call that produced these buffers",
        ));
    }
    let n = mesh.n_vertices();
    if cache.cam.nrows() != n {
        return Err(Error::dim("mesh vertex count", cache.cam.nrows(), n));
    }
    if dl_dimage.dim() != output.image.dim() {
        return Err(Error::dim(
            "dl_dimage shape",
            format!("{:?}", output.image.dim()),
            format!("{:?}", dl_dimage.dim()),
        ));
    }

    let (h, w) = (params.image_height, params.image_width);
    let mut dshaded = Array2::<f64>::zeros((n, 3));
    let mut dscreen = Array2::<f64>::zeros((n, 2));

    for r in 0..h {
        let py = r as f64 + 0.5;
        for c in 0..w {
            let fid = output.face_id_buffer[[r, c]];
            if fid < 0 {
                continue;
            }
            let face = cache.faces[fid as usize];
            let px = c as f64 + 0.5;
            let dl = [
                dl_dimage[[r, c, 0]],
                dl_dimage[[r, c, 1]],
                dl_dimage[[r, c, 2]],
            ];
            let wts = [
                output.barycentric_buffer[[r, c, 0]],
                output.barycentric_buffer[[r, c, 1]],
                output.barycentric_buffer[[r, c, 2]],
            ];

            // Color branch: image = sum_k w_k * shaded[v_k].
            let mut dw = [0.0; 3];
            for k in 0..3 {
                let v = face[k];
                for ch in 0..3 {
                    dshaded[[v, ch]] += dl[ch] * wts[k];
                    dw[k] += dl[ch] * cache.shaded[[v, ch]];
                }
            }

            // Geometry branch: w_k = N_k / A over projected coordinates, in
            // the face's original vertex order (signs cancel in the ratio).
            let s = [
                [cache.screen[[face[0], 0]], cache.screen[[face[0], 1]]],
                [cache.screen[[face[1], 0]], cache.screen[[face[1], 1]]],
                [cache.screen[[face[2], 0]], cache.screen[[face[2], 1]]],
            ];
            let area = cross2(
                s[1][0] - s[0][0],
                s[1][1] - s[0][1],
                s[2][0] - s[0][0],
                s[2][1] - s[0][1],
            );
            let nk = [
                cross2(s[2][0] - s[1][0], s[2][1] - s[1][1], px - s[1][0], py - s[1][1]),
                cross2(s[0][0] - s[2][0], s[0][1] - s[2][1], px - s[2][0], py - s[2][1]),
                cross2(s[1][0] - s[0][0], s[1][1] - s[0][1], px - s[0][0], py - s[0][1]),
            ];
            // dA/ds_j, with A written on the original order.
            let da = [
                [s[1][1] - s[2][1], s[2][0] - s[1][0]],
                [s[2][1] - s[0][1], s[0][0] - s[2][0]],
                [s[0][1] - s[1][1], s[1][0] - s[0][0]],
            ];
            let inv_a2 = 1.0 / (area * area);
            for k in 0..3 {
                if dw[k] == 0.0 {
                    continue;
                }
                // N_k depends on vertices a = k+1, b = k+2 and the pixel.
                let ai = (k + 1) % 3;
                let bi = (k + 2) % 3;
                let (a, b) = (s[ai], s[bi]);
                let dn_da = [b[1] - py, px - b[0]];
                let dn_db = [py - a[1], a[0] - px];
                for j in 0..3 {
                    let dn = if j == ai {
                        dn_da
                    } else if j == bi {
                        dn_db
                    } else {
                        [0.0, 0.0]
                    };
                    let gu = (dn[0] * area - nk[k] * da[j][0]) * inv_a2;
                    let gv = (dn[1] * area - nk[k] * da[j][1]) * inv_a2;
                    dscreen[[face[j], 0]] += dw[k] * gu;
                    dscreen[[face[j], 1]] += dw[k] * gv;
                }
            }
        }
    }

    // Vertex pass: shaded = clamp(color * shading); the clamp gates both
    // branches.
    let mut dcolors = Array2::<f64>::zeros((n, 3));
    let mut dshading = vec![0.0; n];
    for i in 0..n {
        for ch in 0..3 {
            if cache.shade_clamp_active[[i, ch]] {
                continue;
            }
            let g = dshaded[[i, ch]];
            if g == 0.0 {
                continue;
            }
            dcolors[[i, ch]] = g * cache.shading[i];
            dshading[i] += g * mesh.colors[[i, ch]];
        }
    }

    // Shading -> illumination and normals.
    let mut dgamma = [0.0; 9];
    let mut draw = Array2::<f64>::zeros((n, 3));
    for i in 0..n {
        let ds = dshading[i];
        if ds == 0.0 {
            continue;
        }
        let nrm = [
            cache.normals[[i, 0]],
            cache.normals[[i, 1]],
            cache.normals[[i, 2]],
        ];
        if nrm == [0.0, 0.0, 0.0] {
            continue;
        }
        let basis = sh_basis(nrm);
        for k in 0..9 {
            dgamma[k] += ds * basis[k];
        }
        let gn = sh_shading_grad(nrm, &params.illumination);
        let dn = [ds * gn[0], ds * gn[1], ds * gn[2]];
        // Through normalization: d(raw) = (dn - n (n . dn)) / |raw|.
        let raw = [
            cache.raw_normals[[i, 0]],
            cache.raw_normals[[i, 1]],
            cache.raw_normals[[i, 2]],
        ];
        let len = norm3(raw);
        if len <= 1e-12 {
            continue;
        }
        let ndot = nrm[0] * dn[0] + nrm[1] * dn[1] + nrm[2] * dn[2];
        for k in 0..3 {
            draw[[i, k]] = (dn[k] - nrm[k] * ndot) / len;
        }
    }

    // Raw normals are sums of face cross products over ALL mesh faces (the
    // forward pass shades from full-mesh normals even for patch renders).
    let mut dpositions = Array2::<f64>::zeros((n, 3));
    for f in &mesh.faces {
        let g = [
            draw[[f[0], 0]] + draw[[f[1], 0]] + draw[[f[2], 0]],
            draw[[f[0], 1]] + draw[[f[1], 1]] + draw[[f[2], 1]],
            draw[[f[0], 2]] + draw[[f[1], 2]] + draw[[f[2], 2]],
        ];
        if g == [0.0, 0.0, 0.0] {
            continue;
        }
        let a = mesh.vertex_position(f[0]);
        let b = mesh.vertex_position(f[1]);
        let c = mesh.vertex_position(f[2]);
        let e1 = sub(b, a);
        let e2 = sub(c, a);
        // d(cross(e1, e2)) pullback: dL/de1 = e2 x g, dL/de2 = g x e1.
        let de1 = cross3(e2, g);
        let de2 = cross3(g, e1);
        for k in 0..3 {
            dpositions[[f[1], k]] += de1[k];
            dpositions[[f[2], k]] += de2[k];
            dpositions[[f[0], k]] -= de1[k] + de2[k];
        }
    }

    // Screen -> camera -> model positions through the pinhole projection.
    let f = params.focal_length;
    for i in 0..n {
        let (du, dv) = (dscreen[[i, 0]], dscreen[[i, 1]]);
        if (du == 0.0 && dv == 0.0) || !cache.valid[i] {
            continue;
        }
        let cxm = cache.cam[[i, 0]];
        let cym = cache.cam[[i, 1]];
        let czm = cache.cam[[i, 2]];
        let dcam = [
            du * f / czm,
            dv * f / czm,
            -f * (du * cxm + dv * cym) / (czm * czm),
        ];
        let dmodel = mat_vec_transposed(&cache.rotation, dcam);
        for k in 0..3 {
            dpositions[[i, k]] += dmodel[k];
        }
    }

    Ok(RenderGrads {
        positions: dpositions,
        colors: dcolors,
        gamma: dgamma,
    })
}

fn cross2(ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    ax * by - ay * bx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::PatchTopology;
    use crate::morphable::AMBIENT_GAMMA0;
    use crate::render::rasterize;
    use crate::rng::{normal, seeded, uniform, Prng};
    use ndarray::Array2 as A2;

    fn random_scene(rng: &mut Prng, k: usize, w: usize, focal: f64) -> Mesh {
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
                // Mid-range colors with slightly off-ambient light keep the
                // shaded values away from the clamp.
                colors.push([
                    uniform(rng, 40.0, 180.0),
                    uniform(rng, 40.0, 180.0),
                    uniform(rng, 40.0, 180.0),
                ]);
            }
            faces.push([3 * t, 3 * t + 1, 3 * t + 2]);
        }
        let n = verts.len();
        let mut p = A2::zeros((n, 3));
        let mut col = A2::zeros((n, 3));
        for i in 0..n {
            for kx in 0..3 {
                p[[i, kx]] = verts[i][kx];
                col[[i, kx]] = colors[i][kx];
            }
        }
        Mesh::new(p, col, faces).unwrap()
    }

    fn soft_light_params(w: usize, h: usize, focal: f64) -> RenderParams {
        let mut p = RenderParams::frontal(w, h);
        p.pose = [0.05, -0.03, 0.02, 0.1, -0.1, 0.0];
        p.focal_length = focal;
        p.illumination = [
            AMBIENT_GAMMA0 * 0.85,
            0.12,
            -0.18,
            0.1,
            0.03,
            -0.05,
            0.08,
            0.02,
            -0.04,
        ];
        p
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = seeded(50);
        let mesh = random_scene(&mut rng, 6, 24, 14.0);
        let params = soft_light_params(24, 24, 14.0);
        let out = rasterize(&mesh, &PatchTopology::full(&mesh), &params).unwrap();
        let g = render_backward(&out, &mesh, &params, &ndarray::Array3::zeros((24, 24, 3)))
            .unwrap();
        assert!(g.positions.iter().all(|&v| v == 0.0));
        assert!(g.colors.iter().all(|&v| v == 0.0));
        assert!(g.gamma.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_color_grad_follows_barycentric_weights() {
        let mut rng = seeded(51);
        let mesh = random_scene(&mut rng, 5, 24, 14.0);
        let mut params = soft_light_params(24, 24, 14.0);
        params.pose = [0.0; 6];
        let out = rasterize(&mesh, &PatchTopology::full(&mesh), &params).unwrap();
        let (mut rr, mut cc) = (usize::MAX, 0);
        'find: for r in 0..24 {
            for c in 0..24 {
                if out.mask[[r, c]] == 1 {
                    (rr, cc) = (r, c);
                    break 'find;
                }
            }
        }
        assert_ne!(rr, usize::MAX);
        let mut dl = ndarray::Array3::zeros((24, 24, 3));
        dl[[rr, cc, 1]] = 1.0;
        let g = render_backward(&out, &mesh, &params, &dl).unwrap();
        let face = out.cache.faces[out.face_id_buffer[[rr, cc]] as usize];
        for (k, &v) in face.iter().enumerate() {
            let want = out.barycentric_buffer[[rr, cc, k]] * out.cache.shading[v];
            assert!((g.colors[[v, 1]] - want).abs() < 1e-12);
            assert_eq!(g.colors[[v, 0]], 0.0);
        }
        let touched: Vec<usize> = (0..mesh.n_vertices())
            .filter(|&i| g.colors[[i, 1]] != 0.0)
            .collect();
        assert!(touched.iter().all(|v| face.contains(v)));
    }

    /// Central-difference check with the coverage-stability filter: a
    /// coordinate is only compared when perturbing it by +/-h leaves every
    /// pixel's face id unchanged.
    fn fd_check_positions(
        mesh: &Mesh,
        params: &RenderParams,
        probe_w: &ndarray::Array3<f64>,
        h_step: f64,
        tol: f64,
    ) {
        let topo = PatchTopology::full(mesh);
        let out = rasterize(mesh, &topo, params).unwrap();
        let g = render_backward(&out, mesh, params, probe_w).unwrap();
        let probe = |m: &Mesh| -> (f64, ndarray::Array2<i32>) {
            let o = rasterize(m, &topo, params).unwrap();
            ((probe_w * &o.image).sum(), o.face_id_buffer)
        };
        let (_, base_ids) = probe(mesh);
        let mut checked = 0;
        let mut max_rel: f64 = 0.0;
        for i in 0..mesh.n_vertices() {
            for k in 0..3 {
                let mut mp = mesh.clone();
                let mut mm = mesh.clone();
                mp.positions[[i, k]] += h_step;
                mm.positions[[i, k]] -= h_step;
                let (lp, idp) = probe(&mp);
                let (lm, idm) = probe(&mm);
                if idp != base_ids || idm != base_ids {
                    continue; // coverage changed: discontinuous, skip
                }
                let numeric = (lp - lm) / (2.0 * h_step);
                let analytic = g.positions[[i, k]];
                let rel = (analytic - numeric).abs()
                    / analytic.abs().max(numeric.abs()).max(1e-8);
                max_rel = max_rel.max(rel);
                checked += 1;
            }
        }
        assert!(checked > 20, "too few stable coordinates ({checked})");
        assert!(max_rel < tol, "max rel error {max_rel} over {checked} coords");
    }

    #[test]
    fn position_gradients_match_finite_differences() {
        let mut rng = seeded(52);
        let mesh = random_scene(&mut rng, 6, 24, 14.0);
        let params = soft_light_params(24, 24, 14.0);
        let probe_w =
            ndarray::Array3::from_shape_fn((24, 24, 3), |_| normal(&mut rng) * 0.1);
        fd_check_positions(&mesh, &params, &probe_w, 1e-3, 1e-3);
    }

    #[test]
    fn color_gradients_match_finite_differences() {
        let mut rng = seeded(53);
        let mesh = random_scene(&mut rng, 6, 24, 14.0);
        let params = soft_light_params(24, 24, 14.0);
        let topo = PatchTopology::full(&mesh);
        let probe_w =
            ndarray::Array3::from_shape_fn((24, 24, 3), |_| normal(&mut rng) * 0.1);
        let out = rasterize(&mesh, &topo, &params).unwrap();
        let g = render_backward(&out, &mesh, &params, &probe_w).unwrap();
        let probe = |m: &Mesh| (&probe_w * &rasterize(m, &topo, &params).unwrap().image).sum();
        let h_step = 1e-2;
        let mut max_rel: f64 = 0.0;
        for i in 0..mesh.n_vertices() {
            for k in 0..3 {
                let mut mp = mesh.clone();
                let mut mm = mesh.clone();
                mp.colors[[i, k]] += h_step;
                mm.colors[[i, k]] -= h_step;
                let numeric = (probe(&mp) - probe(&mm)) / (2.0 * h_step);
                let analytic = g.colors[[i, k]];
                let rel = (analytic - numeric).abs()
                    / analytic.abs().max(numeric.abs()).max(1e-8);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel < 1e-3, "max rel error {max_rel}");
    }

    #[test]
    fn gamma_gradients_match_finite_differences() {
        let mut rng = seeded(54);
        let mesh = random_scene(&mut rng, 6, 24, 14.0);
        let params = soft_light_params(24, 24, 14.0);
        let topo = PatchTopology::full(&mesh);
        let probe_w =
            ndarray::Array3::from_shape_fn((24, 24, 3), |_| normal(&mut rng) * 0.1);
        let out = rasterize(&mesh, &topo, &params).unwrap();
        let g = render_backward(&out, &mesh, &params, &probe_w).unwrap();
        let h_step = 1e-3;
        let mut max_rel: f64 = 0.0;
        for k in 0..9 {
            let mut pp = params.clone();
            let mut pm = params.clone();
            pp.illumination[k] += h_step;
            pm.illumination[k] -= h_step;
            let lp = (&probe_w * &rasterize(&mesh, &topo, &pp).unwrap().image).sum();
            let lm = (&probe_w * &rasterize(&mesh, &topo, &pm).unwrap().image).sum();
            let numeric = (lp - lm) / (2.0 * h_step);
            let analytic = g.gamma[k];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-3, "max rel error {max_rel}");
    }

    #[test]
    fn mismatched_params_are_rejected() {
        let mut rng = seeded(55);
        let mesh = random_scene(&mut rng, 3, 16, 10.0);
        let params = soft_light_params(16, 16, 10.0);
        let out = rasterize(&mesh, &PatchTopology::full(&mesh), &params).unwrap();
        let mut other = params.clone();
        other.focal_length += 1.0;
        let dl = ndarray::Array3::zeros((16, 16, 3));
        assert!(render_backward(&out, &mesh, &other, &dl).is_err());
        let bad_dl = ndarray::Array3::zeros((8, 8, 3));
        assert!(render_backward(&out, &mesh, &params, &bad_dl).is_err());
    }
}
