//! Finite-difference verification of every analytic gradient path.
//!
//! The checker compares an analytic gradient against central differences
//! (f(p + h·e_i) − f(p − h·e_i)) / 2h over a documented coordinate set:
//! every coordinate when the block has at most 500, otherwise a seeded
//! 500-coordinate sample. Relative error is measured against
//! max(|analytic|, |numeric|, 1e-8).
//!
//! Probes return a stability token alongside the loss. Hard rasterization
//! makes the image piecewise smooth in geometry: when a perturbed
//! evaluation lands on a different pixel-coverage pattern the analytic
//! gradient (which deliberately ignores visibility changes) and the
//! numeric quotient disagree by construction, so any coordinate whose
//! ±h probes change the token is skipped and counted rather than failed.

use ndarray::{Array2, Array3};

use crate::attack::attack_loss;
use crate::attack::AttackMode;
use crate::mesh::{extract_patch, Mesh, PatchRegion, PatchTopology};
use crate::morphable::{
    generate_synthetic_model, sample_identity, synthesize, synthesize_backward, Coefficients,
    DIM_EXP, DIM_ID, DIM_TEX,
};
use crate::recognition::{build_toy_model, embed, embed_backward, ArchId, EMBED_DIM};
use crate::render::{
    composite, composite_backward, rasterize, render_backward, render_face, RenderParams,
};
use crate::rng::{sample_indices, seeded, uniform, Prng};
use crate::{Error, Result};

/// Cap on exhaustive coordinate sweeps; larger blocks get a seeded sample.
pub const FD_MAX_EXHAUSTIVE: usize = 500;

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Coordinates compared against the analytic gradient.
    pub checked: usize,
    /// Coordinates skipped because a probe changed the stability token.
    pub skipped: usize,
}

/// Central-difference check of `analytic` at `params`. The probe maps a
/// parameter vector to (loss, stability token); probes that move the token
/// relative to the base evaluation skip their coordinate.
pub fn finite_difference_check(
    params: &[f64],
    analytic: &[f64],
    h: f64,
    seed: u64,
    mut probe: impl FnMut(&[f64]) -> Result<(f64, u64)>,
) -> Result<FdReport> {
    if !h.is_finite() || h <= 0.0 {
        return Err(Error::validation("finite_difference_check.h", "must be finite and > 0"));
    }
    if analytic.len() != params.len() {
        return Err(Error::dim("analytic gradient length", params.len(), analytic.len()));
    }
    let (base_loss, base_token) = probe(params)?;
    if !base_loss.is_finite() {
        return Err(Error::NonFiniteProbe);
    }
    let n = params.len();
    let coords: Vec<usize> = if n <= FD_MAX_EXHAUSTIVE {
        (0..n).collect()
    } else {
        sample_indices(&mut seeded(seed), n, FD_MAX_EXHAUSTIVE)
    };
    let mut work = params.to_vec();
    let mut report = FdReport { max_rel_error: 0.0, checked: 0, skipped: 0 };
    for i in coords {
        work[i] = params[i] + h;
        let (lp, tp) = probe(&work)?;
        work[i] = params[i] - h;
        let (lm, tm) = probe(&work)?;
        work[i] = params[i];
        if !lp.is_finite() || !lm.is_finite() {
            return Err(Error::NonFiniteProbe);
        }
        if tp != base_token || tm != base_token {
            report.skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * h);
        let denom = numeric.abs().max(analytic[i].abs()).max(1e-8);
        let rel = (numeric - analytic[i]).abs() / denom;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// FNV-1a fold over the face-id buffer: equal buffers, equal tokens.
fn coverage_token(face_ids: &Array2<i32>) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &id in face_ids.iter() {
        hash ^= id as u32 as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Gradient-verification scope, one per differentiated stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    Morphable,
    Render,
    Recognition,
    EndToEnd,
}

impl GradScope {
    pub const ALL: [GradScope; 4] =
        [GradScope::Morphable, GradScope::Render, GradScope::Recognition, GradScope::EndToEnd];

    pub fn name(self) -> &'static str {
        match self {
            GradScope::Morphable => "morphable",
            GradScope::Render => "render",
            GradScope::Recognition => "recognition",
            GradScope::EndToEnd => "end2end",
        }
    }

    pub fn parse(s: &str) -> Result<GradScope> {
        match s {
            "morphable" => Ok(GradScope::Morphable),
            "render" => Ok(GradScope::Render),
            "recognition" => Ok(GradScope::Recognition),
            "end2end" => Ok(GradScope::EndToEnd),
            other => Err(Error::validation(
                "gradcheck.scope",
                format!("unknown scope '{other}' (morphable|render|recognition|end2end)"),
            )),
        }
    }

    /// Maximum relative error admitted for the scope.
    pub fn tolerance(self) -> f64 {
        match self {
            GradScope::Morphable => 1e-4,
            GradScope::Render => 1e-3,
            GradScope::Recognition => 1e-3,
            GradScope::EndToEnd => 5e-3,
        }
    }
}

/// One named parameter block's comparison within a scope run.
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub group: String,
    pub report: FdReport,
}

/// Full outcome of one scope at one seed.
#[derive(Debug, Clone)]
pub struct ScopeOutcome {
    pub scope: GradScope,
    pub groups: Vec<GroupReport>,
    pub pass: bool,
}

fn random_weights(rng: &mut Prng, shape: (usize, usize)) -> Array2<f64> {
    let mut w = Array2::<f64>::zeros(shape);
    for v in w.iter_mut() {
        *v = uniform(rng, -1.0, 1.0);
    }
    w
}

fn coefficients_from_flat(flat: &[f64], template: &Coefficients) -> Coefficients {
    Coefficients {
        alpha: flat[..DIM_ID].to_vec(),
        beta: flat[DIM_ID..DIM_ID + DIM_EXP].to_vec(),
        tau: flat[DIM_ID + DIM_EXP..DIM_ID + DIM_EXP + DIM_TEX].to_vec(),
        gamma: template.gamma,
        pose: template.pose,
    }
}

fn flatten_coefficients(c: &Coefficients) -> Vec<f64> {
    let mut flat = Vec::with_capacity(DIM_ID + DIM_EXP + DIM_TEX);
    flat.extend_from_slice(&c.alpha);
    flat.extend_from_slice(&c.beta);
    flat.extend_from_slice(&c.tau);
    flat
}

fn block_ranges() -> [(&'static str, std::ops::Range<usize>); 3] {
    [
        ("alpha", 0..DIM_ID),
        ("beta", DIM_ID..DIM_ID + DIM_EXP),
        ("tau", DIM_ID + DIM_EXP..DIM_ID + DIM_EXP + DIM_TEX),
    ]
}

/// Synthesis gradients: a fixed random linear functional of the vertex
/// positions and colors, differentiated back to the coefficient blocks.
/// The probe token tracks the texture-clamp pattern so probes that flip a
/// clamp are skipped instead of failed.
fn check_morphable(seed: u64, resolution: usize) -> Result<Vec<GroupReport>> {
    let model = generate_synthetic_model(seed, resolution)?;
    let c = sample_identity(&model, seed ^ 0x51ed);
    let mut rng = seeded(seed ^ 0xbeef);
    let wp = random_weights(&mut rng, (model.n_vertices(), 3));
    let wc = random_weights(&mut rng, (model.n_vertices(), 3));

    let synth = synthesize(&model, &c)?;
    let grads = synthesize_backward(&model, wp.view(), wc.view(), &synth.clamp_active)?;
    let analytic = {
        let mut v = Vec::new();
        v.extend_from_slice(&grads.alpha);
        v.extend_from_slice(&grads.beta);
        v.extend_from_slice(&grads.tau);
        v
    };
    let params = flatten_coefficients(&c);
    let mut probe = |flat: &[f64]| -> Result<(f64, u64)> {
        let s = synthesize(&model, &coefficients_from_flat(flat, &c))?;
        let loss = (&s.positions * &wp).sum() + (&s.colors * &wc).sum();
        let mut token: u64 = 0xcbf2_9ce4_8422_2325;
        for &active in s.clamp_active.iter() {
            token ^= active as u64;
            token = token.wrapping_mul(0x0000_0100_0000_01b3);
        }
        Ok((loss, token))
    };
    let mut groups = Vec::new();
    for (name, range) in block_ranges() {
        let report = finite_difference_check(
            &params[range.clone()],
            &analytic[range.clone()],
            1e-4,
            seed,
            |block| {
                let mut flat = params.clone();
                flat[range.clone()].copy_from_slice(block);
                probe(&flat)
            },
        )?;
        groups.push(GroupReport { group: name.to_string(), report });
    }
    Ok(groups)
}

/// Rasterizer gradients for vertex positions, vertex colors, and the
/// illumination vector against a fixed random image functional.
fn check_render(seed: u64, resolution: usize, side: usize) -> Result<Vec<GroupReport>> {
    let model = generate_synthetic_model(seed, resolution)?;
    let c = sample_identity(&model, seed ^ 0x7a11);
    let synth = synthesize(&model, &c)?;
    // Colors pulled strictly inside [0, 255] so ±h probes stay valid.
    let colors = synth.colors.mapv(|v| v.clamp(1.0, 254.0));
    let mesh = Mesh::new(synth.positions, colors, model.faces.clone())?;
    let topo = PatchTopology::full(&mesh);
    let params = RenderParams::frontal(side, side).with_coefficients(&c);

    let mut rng = seeded(seed ^ 0xfeed);
    let mut w = Array3::<f64>::zeros((side, side, 3));
    for v in w.iter_mut() {
        *v = uniform(&mut rng, -1.0, 1.0);
    }

    let output = rasterize(&mesh, &topo, &params)?;
    let grads = render_backward(&output, &mesh, &params, &w)?;

    let loss_of = |m: &Mesh, p: &RenderParams| -> Result<(f64, u64)> {
        let out = rasterize(m, &topo, p)?;
        Ok(((&out.image * &w).sum(), coverage_token(&out.face_id_buffer)))
    };

    let mut groups = Vec::new();
    let n = mesh.n_vertices();

    let flat_positions: Vec<f64> = mesh.positions.iter().copied().collect();
    let analytic_p: Vec<f64> = grads.positions.iter().copied().collect();
    let report = finite_difference_check(&flat_positions, &analytic_p, 1e-3, seed, |flat| {
        let positions = Array2::from_shape_vec((n, 3), flat.to_vec()).expect("shape");
        let m = Mesh::new(positions, mesh.colors.clone(), mesh.faces.clone())?;
        loss_of(&m, &params)
    })?;
    groups.push(GroupReport { group: "positions".to_string(), report });

    let flat_colors: Vec<f64> = mesh.colors.iter().copied().collect();
    let analytic_c: Vec<f64> = grads.colors.iter().copied().collect();
    let report = finite_difference_check(&flat_colors, &analytic_c, 1e-2, seed, |flat| {
        let colors = Array2::from_shape_vec((n, 3), flat.to_vec()).expect("shape");
        let m = Mesh::new(mesh.positions.clone(), colors, mesh.faces.clone())?;
        loss_of(&m, &params)
    })?;
    groups.push(GroupReport { group: "colors".to_string(), report });

    let report =
        finite_difference_check(&params.illumination, &grads.gamma, 1e-3, seed, |gamma| {
            let mut p = params.clone();
            p.illumination.copy_from_slice(gamma);
            loss_of(&mesh, &p)
        })?;
    groups.push(GroupReport { group: "illumination".to_string(), report });
    Ok(groups)
}

/// Embedding gradients: a fixed random functional of the embedding,
/// differentiated back to the input pixels.
fn check_recognition(seed: u64, side: usize) -> Result<Vec<GroupReport>> {
    let model = build_toy_model(ArchId::A, seed);
    let mut rng = seeded(seed ^ 0xace5);
    let mut image = Array3::<f64>::zeros((side, side, 3));
    for v in image.iter_mut() {
        *v = uniform(&mut rng, 0.0, 255.0);
    }
    let mut w = vec![0.0; EMBED_DIM];
    for v in w.iter_mut() {
        *v = uniform(&mut rng, -1.0, 1.0);
    }

    let (_, cache) = embed(&model, &image)?;
    let analytic_img = embed_backward(&model, &cache, &w)?;

    let flat: Vec<f64> = image.iter().copied().collect();
    let analytic: Vec<f64> = analytic_img.iter().copied().collect();
    let report = finite_difference_check(&flat, &analytic, 1e-1, seed, |p| {
        let img = Array3::from_shape_vec((side, side, 3), p.to_vec()).expect("shape");
        let (e, _) = embed(&model, &img)?;
        Ok((e.iter().zip(&w).map(|(a, b)| a * b).sum(), 0))
    })?;
    Ok(vec![GroupReport { group: "image".to_string(), report }])
}

/// The full attack loss differentiated to the coefficient blocks:
/// synthesize, render the patch, composite over the attacker's image,
/// embed, signed cosine against the victim's gallery embedding.
fn check_end_to_end(seed: u64, resolution: usize, side: usize) -> Result<Vec<GroupReport>> {
    let morphable = generate_synthetic_model(seed, resolution)?;
    let white = build_toy_model(ArchId::A, seed ^ 0xeeee);
    let attacker = sample_identity(&morphable, seed ^ 0xaaaa);
    let victim = sample_identity(&morphable, seed ^ 0x5555);
    let render = RenderParams::frontal(side, side);
    let patch = extract_patch(&morphable.mean_mesh()?, &PatchRegion::Eye)?;
    let params = render.clone().with_coefficients(&attacker);
    let victim_image = render_face(&morphable, &victim, &render)?.image;
    let base_image = {
        let mesh = morphable.synth_mesh(&attacker)?;
        let full = PatchTopology::full(&mesh);
        rasterize(&mesh, &full, &params)?.image
    };

    // Probes only need the loss and the coverage token; the analytic
    // gradient chain runs once, below.
    let forward = |c: &Coefficients| -> Result<(f64, u64)> {
        let synth = synthesize(&morphable, c)?;
        let mesh = Mesh::new(synth.positions, synth.colors, morphable.faces.clone())?;
        let render_out = rasterize(&mesh, &patch, &params)?;
        let token = coverage_token(&render_out.face_id_buffer);
        let image = composite(&render_out, &base_image)?;
        let (loss, _) = attack_loss(&white, &image, &victim_image, AttackMode::Impersonate)?;
        Ok((loss, token))
    };

    let analytic = {
        let synth = synthesize(&morphable, &attacker)?;
        let clamp = synth.clamp_active;
        let mesh = Mesh::new(synth.positions, synth.colors, morphable.faces.clone())?;
        let render_out = rasterize(&mesh, &patch, &params)?;
        let image = composite(&render_out, &base_image)?;
        let (_, dl) = attack_loss(&white, &image, &victim_image, AttackMode::Impersonate)?;
        let dl_dpatch = composite_backward(&render_out, &dl)?;
        let grads = render_backward(&render_out, &mesh, &params, &dl_dpatch)?;
        let cg =
            synthesize_backward(&morphable, grads.positions.view(), grads.colors.view(), &clamp)?;
        let mut v = Vec::new();
        v.extend_from_slice(&cg.alpha);
        v.extend_from_slice(&cg.beta);
        v.extend_from_slice(&cg.tau);
        v
    };
    let flat = flatten_coefficients(&attacker);
    let mut groups = Vec::new();
    for (name, range) in block_ranges() {
        let report = finite_difference_check(
            &flat[range.clone()],
            &analytic[range.clone()],
            1e-3,
            seed,
            |block| {
                let mut full = flat.clone();
                full[range.clone()].copy_from_slice(block);
                forward(&coefficients_from_flat(&full, &attacker))
            },
        )?;
        groups.push(GroupReport { group: name.to_string(), report });
    }
    Ok(groups)
}

/// Runs one scope at one seed. `resolution` sizes the morphable model and
/// `side` the render/embedding input.
pub fn run_gradcheck(
    scope: GradScope,
    seed: u64,
    resolution: usize,
    side: usize,
) -> Result<ScopeOutcome> {
    let groups = match scope {
        GradScope::Morphable => check_morphable(seed, resolution)?,
        GradScope::Render => check_render(seed, resolution, side)?,
        GradScope::Recognition => check_recognition(seed, side)?,
        GradScope::EndToEnd => check_end_to_end(seed, resolution, side)?,
    };
    let tol = scope.tolerance();
    let pass = groups.iter().all(|g| g.report.max_rel_error < tol && g.report.checked > 0);
    Ok(ScopeOutcome { scope, groups, pass })
}
