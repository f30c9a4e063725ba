//! Vertex- and color-space mesh attacks.
//!
//! Instead of steering morphable-model coefficients, these attacks move
//! the patch's vertex positions and vertex colors directly. Each
//! iteration runs one forward pass (render the patch, composite over the
//! attacker's image, similarity loss), backpropagates to the kept
//! vertices, takes one Adam step per block (positions, colors), and
//! projects both blocks back into their budget balls; colors additionally
//! stay inside the valid [0, 255] range. The regularized variant adds
//! shape-preservation penalties (chamfer to the original patch surface,
//! Laplacian smoothness, edge-length preservation) whose gradients join
//! the position block.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::optimizer::{project_budget_in_place, AdamState, BudgetSpace};
use super::{attack_loss, AttackConfig, AttackResult};
use crate::mesh::{
    chamfer_with_grad, edge_length_with_grad, laplacian_with_grad, Mesh, PatchTopology,
};
use crate::recognition::EmbeddingModel;
use crate::render::{composite, composite_backward, rasterize, render_backward};
use crate::{Error, Result};

/// Weights for the shape-preservation penalties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegWeights {
    pub chamfer: f64,
    pub laplacian: f64,
    pub edge_length: f64,
}

impl RegWeights {
    pub const ZERO: RegWeights = RegWeights { chamfer: 0.0, laplacian: 0.0, edge_length: 0.0 };

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_chamfer", self.chamfer),
            ("lambda_laplacian", self.laplacian),
            ("lambda_edge_length", self.edge_length),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::validation(name, "must be finite and >= 0"));
            }
        }
        Ok(())
    }

    fn is_zero(&self) -> bool {
        self.chamfer == 0.0 && self.laplacian == 0.0 && self.edge_length == 0.0
    }
}

/// Total regularizer value and its gradient w.r.t. the full position
/// array. Gradients are supported only on vertices referenced by `faces`.
/// Every term is skipped outright at zero weight so that a zero-weight
/// run stays bitwise identical to the unregularized attack.
pub(crate) fn regularizer_terms(
    positions: &Array2<f64>,
    original_kept: &Array2<f64>,
    reference: &Array2<f64>,
    kept: &[usize],
    faces: &[[usize; 3]],
    weights: RegWeights,
) -> Result<(f64, Array2<f64>)> {
    let n = positions.nrows();
    let mut total = 0.0;
    let mut grad = Array2::<f64>::zeros((n, 3));
    if weights.chamfer != 0.0 {
        let moving = gather_rows(positions, kept);
        let (loss, g) = chamfer_with_grad(moving.view(), original_kept.view())?;
        total += weights.chamfer * loss;
        for (j, &v) in kept.iter().enumerate() {
            for d in 0..3 {
                grad[[v, d]] += weights.chamfer * g[[j, d]];
            }
        }
    }
    if weights.laplacian != 0.0 {
        let (loss, g) = laplacian_with_grad(positions.view(), faces)?;
        total += weights.laplacian * loss;
        grad.scaled_add(weights.laplacian, &g);
    }
    if weights.edge_length != 0.0 {
        let (loss, g) = edge_length_with_grad(positions.view(), reference.view(), faces)?;
        total += weights.edge_length * loss;
        grad.scaled_add(weights.edge_length, &g);
    }
    Ok((total, grad))
}

fn gather_rows(a: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((rows.len(), 3));
    for (j, &v) in rows.iter().enumerate() {
        for d in 0..3 {
            out[[j, d]] = a[[v, d]];
        }
    }
    out
}

fn run(
    config: &AttackConfig,
    model_white: &EmbeddingModel,
    base_mesh: &Mesh,
    patch: &PatchTopology,
    attacker_image: &Array3<f64>,
    victim_image: &Array3<f64>,
    weights: RegWeights,
) -> Result<AttackResult> {
    let start = Instant::now();
    config.validate_for_run()?;
    weights.validate()?;
    base_mesh.validate()?;
    if patch.faces.is_empty() {
        return Err(Error::EmptyPatch);
    }
    let kept = &patch.kept_vertices;
    let n = base_mesh.n_vertices();
    for &v in kept {
        if v >= n {
            return Err(Error::dim("patch vertex index", format!("< {n}"), v));
        }
    }

    let mut positions = base_mesh.positions.clone();
    let mut colors = base_mesh.colors.clone();
    let original_kept = gather_rows(&positions, kept);

    // Flattened kept-vertex views drive the optimizer; the full arrays
    // are the single source of truth between steps.
    let flatten = |a: &Array2<f64>| -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * kept.len());
        for &v in kept {
            for d in 0..3 {
                out.push(a[[v, d]]);
            }
        }
        out
    };
    let scatter = |a: &mut Array2<f64>, flat: &[f64]| {
        for (j, &v) in kept.iter().enumerate() {
            for d in 0..3 {
                a[[v, d]] = flat[3 * j + d];
            }
        }
    };

    let ref_positions = flatten(&positions);
    let ref_colors = flatten(&colors);
    let mut p_vec = ref_positions.clone();
    let mut c_vec = ref_colors.clone();
    let mut adam_p = AdamState::new(p_vec.len(), config.adam);
    let mut adam_c = AdamState::new(c_vec.len(), config.adam);
    let lr = config.effective_learning_rate();

    let mut loss_trace = Vec::with_capacity(config.iterations);
    let mut similarity_trace = Vec::with_capacity(config.iterations);

    let forward = |positions: &Array2<f64>, colors: &Array2<f64>| -> Result<_> {
        let mesh = Mesh::new(positions.clone(), colors.clone(), base_mesh.faces.clone())?;
        let render = rasterize(&mesh, patch, &config.render)?;
        let image = composite(&render, attacker_image)?;
        let (loss, dl) = attack_loss(model_white, &image, victim_image, config.mode)?;
        Ok((loss, dl, render, mesh, image))
    };

    for iteration in 0..config.iterations {
        let (loss, dl, render, mesh, _) = forward(&positions, &colors)?;
        let (reg_loss, reg_grad) = regularizer_terms(
            &positions,
            &original_kept,
            &base_mesh.positions,
            kept,
            &patch.faces,
            weights,
        )?;
        let total = if weights.is_zero() { loss } else { loss + reg_loss };
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration,
                context: "mesh-space attack".to_string(),
                config: serde_json::to_string(config)?,
            });
        }
        loss_trace.push(total);
        similarity_trace.push(loss * config.mode.loss_sign());

        let dl_dpatch = composite_backward(&render, &dl)?;
        let grads = render_backward(&render, &mesh, &config.render, &dl_dpatch)?;
        let mut gp = Vec::with_capacity(3 * kept.len());
        let mut gc = Vec::with_capacity(3 * kept.len());
        for &v in kept {
            for d in 0..3 {
                let g = if weights.is_zero() {
                    grads.positions[[v, d]]
                } else {
                    grads.positions[[v, d]] + reg_grad[[v, d]]
                };
                gp.push(g);
                gc.push(grads.colors[[v, d]]);
            }
        }
        adam_p.step(&mut p_vec, &gp, lr)?;
        adam_c.step(&mut c_vec, &gc, lr)?;
        project_budget_in_place(&mut p_vec, &ref_positions, config.budget, BudgetSpace::VertexUnits);
        project_budget_in_place(&mut c_vec, &ref_colors, config.budget, BudgetSpace::ColorUnits);
        // Colors must remain valid mesh colors; the references are in
        // range, so this clamp can only shrink the deviation.
        for c in c_vec.iter_mut() {
            *c = c.clamp(0.0, 255.0);
        }
        scatter(&mut positions, &p_vec);
        scatter(&mut colors, &c_vec);
    }

    let (final_loss, _, _, _, image) = forward(&positions, &colors)?;
    let mesh = Mesh::new(positions, colors, patch.faces.clone())?;
    Ok(AttackResult {
        mesh,
        patch: patch.clone(),
        composite: image,
        coefficients: None,
        loss_trace,
        similarity_trace,
        substep_losses: Vec::new(),
        final_loss,
        final_similarity: final_loss * config.mode.loss_sign(),
        success: BTreeMap::new(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Unregularized vertex/color attack on the patch.
pub fn at3d_m(
    config: &AttackConfig,
    model_white: &EmbeddingModel,
    base_mesh: &Mesh,
    patch: &PatchTopology,
    attacker_image: &Array3<f64>,
    victim_image: &Array3<f64>,
) -> Result<AttackResult> {
    run(config, model_white, base_mesh, patch, attacker_image, victim_image, RegWeights::ZERO)
}

/// Vertex/color attack with shape-preservation penalties added to the
/// position objective. All weights must be finite and non-negative; with
/// every weight zero the run is identical to [`at3d_m`].
#[allow(clippy::too_many_arguments)]
pub fn at3d_ml(
    config: &AttackConfig,
    model_white: &EmbeddingModel,
    base_mesh: &Mesh,
    patch: &PatchTopology,
    attacker_image: &Array3<f64>,
    victim_image: &Array3<f64>,
    weights: RegWeights,
) -> Result<AttackResult> {
    run(config, model_white, base_mesh, patch, attacker_image, victim_image, weights)
}
