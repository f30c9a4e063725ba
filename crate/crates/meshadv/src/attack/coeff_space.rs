//! Coefficient-space mesh attack.
//!
//! The adversarial patch is parameterized by the morphable model's
//! identity, expression, and texture coefficients rather than raw
//! vertices, so every perturbation stays on the model's face manifold.
//! Each iteration runs three sequential sub-updates — identity, then
//! expression, then texture — and each sub-update performs a complete
//! forward pass (synthesize, render the patch, composite over the
//! attacker's image, similarity loss), backpropagates to its own
//! coefficient block only, takes one Adam step on that block, and projects
//! the block back into the budget ball. Later sub-updates therefore see
//! the values earlier ones just produced. Illumination and pose stay fixed
//! at their initialized values.
//!
//! Optimization runs in prior-normalized coordinates (coefficients divided
//! by their per-column std), where the budget ball is the plain cube
//! [−η, +η] and one learning rate suits all three blocks.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array3;

use super::optimizer::{project_budget_in_place, AdamState, BudgetSpace};
use super::{attack_loss, init_coefficients, AttackConfig, AttackResult};
use crate::mesh::{extract_patch, Mesh, PatchTopology};
use crate::morphable::{synthesize, synthesize_backward, Coefficients, MorphableModel};
use crate::recognition::EmbeddingModel;
use crate::render::{composite, composite_backward, render_backward, render_face, rasterize, RenderOutput, RenderParams};
use crate::{Error, Result};

const BLOCK_NAMES: [&str; 3] = ["identity", "expression", "texture"];

struct ForwardState {
    loss: f64,
    similarity: f64,
    composite: Array3<f64>,
    render: RenderOutput,
    mesh: Mesh,
    clamp_active: ndarray::Array2<bool>,
    dl_dcomposite: Array3<f64>,
}

/// One full forward pass from normalized coefficient blocks to the loss.
#[allow(clippy::too_many_arguments)]
fn forward(
    z: &[Vec<f64>; 3],
    sigma: &[&[f64]; 3],
    template: &Coefficients,
    morphable: &MorphableModel,
    patch: &PatchTopology,
    params: &RenderParams,
    base_image: &Array3<f64>,
    victim_image: &Array3<f64>,
    model_white: &EmbeddingModel,
    config: &AttackConfig,
) -> Result<(ForwardState, Coefficients)> {
    let denorm = |zs: &[f64], sd: &[f64]| -> Vec<f64> {
        zs.iter().zip(sd).map(|(v, s)| v * s).collect()
    };
    let coeffs = Coefficients {
        alpha: denorm(&z[0], sigma[0]),
        beta: denorm(&z[1], sigma[1]),
        tau: denorm(&z[2], sigma[2]),
        gamma: template.gamma,
        pose: template.pose,
    };
    let synth = synthesize(morphable, &coeffs)?;
    let clamp_active = synth.clamp_active;
    let mesh = Mesh::new(synth.positions, synth.colors, morphable.faces.clone())?;
    let render = rasterize(&mesh, patch, params)?;
    let image = composite(&render, base_image)?;
    let (loss, dl_dcomposite) = attack_loss(model_white, &image, victim_image, config.mode)?;
    Ok((
        ForwardState {
            loss,
            similarity: loss * config.mode.loss_sign(),
            composite: image,
            render,
            mesh,
            clamp_active,
            dl_dcomposite,
        },
        coeffs,
    ))
}

/// Runs the alternating coefficient-space attack and returns the final
/// patch mesh, composite, and traces. With zero iterations the result is
/// the initialized state evaluated once.
pub fn at3d_p(
    config: &AttackConfig,
    model_white: &EmbeddingModel,
    morphable: &MorphableModel,
    attacker: &Coefficients,
    victim: &Coefficients,
) -> Result<AttackResult> {
    let start = Instant::now();
    config.validate_for_run()?;
    attacker.validate()?;
    victim.validate()?;

    let patch = extract_patch(&morphable.mean_mesh()?, &config.region)?;
    let init = init_coefficients(morphable, config.init, attacker, victim, config.seed)?;
    // Pose and illumination freeze at their initialized values.
    let params = config.render.clone().with_coefficients(&init);
    // The victim's gallery image, at the victim's own pose and light.
    let victim_image = render_face(morphable, victim, &config.render)?.image;
    // The attacker's own face rendered under the attack pose and light,
    // so patch pixels composite onto an aligned scene.
    let base_image = {
        let mesh = morphable.synth_mesh(attacker)?;
        let full = PatchTopology::full(&mesh);
        rasterize(&mesh, &full, &params)?.image
    };

    let sigma: [&[f64]; 3] = [
        &morphable.coeff_std_id,
        &morphable.coeff_std_exp,
        &morphable.coeff_std_tex,
    ];
    let normalize = |cs: &[f64], sd: &[f64]| -> Vec<f64> {
        cs.iter().zip(sd).map(|(c, s)| c / s).collect()
    };
    let mut z = [
        normalize(&init.alpha, sigma[0]),
        normalize(&init.beta, sigma[1]),
        normalize(&init.tau, sigma[2]),
    ];
    let z_ref = z.clone();
    let mut adam = [
        AdamState::new(z[0].len(), config.adam),
        AdamState::new(z[1].len(), config.adam),
        AdamState::new(z[2].len(), config.adam),
    ];
    let lr = config.effective_learning_rate();

    let mut loss_trace = Vec::with_capacity(config.iterations);
    let mut similarity_trace = Vec::with_capacity(config.iterations);
    let mut substep_losses = Vec::with_capacity(config.iterations);

    for iteration in 0..config.iterations {
        let mut substeps = [0.0; 3];
        for block in 0..3 {
            let (state, _) = forward(
                &z, &sigma, &init, morphable, &patch, &params, &base_image, &victim_image,
                model_white, config,
            )?;
            if !state.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration,
                    context: format!("coefficient-space attack, {} sub-update", BLOCK_NAMES[block]),
                    config: serde_json::to_string(config)?,
                });
            }
            substeps[block] = state.loss;
            if block == 0 {
                loss_trace.push(state.loss);
                similarity_trace.push(state.similarity);
            }
            let dl_dpatch = composite_backward(&state.render, &state.dl_dcomposite)?;
            let grads = render_backward(&state.render, &state.mesh, &params, &dl_dpatch)?;
            let coeff_grads = synthesize_backward(
                morphable,
                grads.positions.view(),
                grads.colors.view(),
                &state.clamp_active,
            )?;
            let raw = match block {
                0 => coeff_grads.alpha,
                1 => coeff_grads.beta,
                _ => coeff_grads.tau,
            };
            // d/dz = d/dcoeff * sigma in the normalized coordinates.
            let gz: Vec<f64> = raw.iter().zip(sigma[block]).map(|(g, s)| g * s).collect();
            adam[block].step(&mut z[block], &gz, lr)?;
            project_budget_in_place(&mut z[block], &z_ref[block], config.budget, BudgetSpace::VertexUnits);
        }
        substep_losses.push(substeps);
    }

    let (final_state, final_coeffs) = forward(
        &z, &sigma, &init, morphable, &patch, &params, &base_image, &victim_image, model_white,
        config,
    )?;
    let mesh = Mesh::new(
        final_state.mesh.positions.clone(),
        final_state.mesh.colors.clone(),
        patch.faces.clone(),
    )?;
    Ok(AttackResult {
        mesh,
        patch,
        composite: final_state.composite,
        coefficients: Some(final_coeffs),
        loss_trace,
        similarity_trace,
        substep_losses,
        final_loss: final_state.loss,
        final_similarity: final_state.similarity,
        success: BTreeMap::new(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{project_budget, AdamParams, AttackMode, InitStrategy};
    use crate::mesh::PatchRegion;
    use crate::morphable::{generate_synthetic_model, sample_identity};
    use crate::recognition::{build_toy_model, ArchId};

    fn small_setup() -> (MorphableModel, EmbeddingModel, Coefficients, Coefficients) {
        let morphable = generate_synthetic_model(31, 12).unwrap();
        let white = build_toy_model(ArchId::A, 31);
        let attacker = sample_identity(&morphable, 1);
        let victim = sample_identity(&morphable, 2);
        (morphable, white, attacker, victim)
    }

    fn small_config(iterations: usize) -> AttackConfig {
        AttackConfig {
            mode: AttackMode::Impersonate,
            iterations,
            budget: 3.0,
            learning_rate: None,
            init: InitStrategy::default(),
            region: PatchRegion::Eye,
            render: RenderParams::frontal(24, 24),
            adam: AdamParams::default(),
            seed: 5,
        }
    }

    #[test]
    fn zero_iterations_returns_initialized_state() {
        let (morphable, white, attacker, victim) = small_setup();
        let config = small_config(0);
        let res = at3d_p(&config, &white, &morphable, &attacker, &victim).unwrap();
        assert!(res.loss_trace.is_empty());
        assert!(res.substep_losses.is_empty());
        let init =
            init_coefficients(&morphable, config.init, &attacker, &victim, config.seed).unwrap();
        let got = res.coefficients.unwrap();
        // Coefficients go through the normalize/denormalize chain; the
        // round trip must be tiny relative to the prior scale.
        for ((g, i), s) in got.alpha.iter().zip(&init.alpha).zip(&morphable.coeff_std_id) {
            assert!((g - i).abs() <= 1e-12 * s);
        }
        assert_eq!(got.gamma, init.gamma);
        assert_eq!(got.pose, init.pose);
        // The result mesh is the initialized synthesis restricted to the patch.
        let synth_mesh = morphable.synth_mesh(&got).unwrap();
        assert_eq!(res.mesh.positions, synth_mesh.positions);
        assert_eq!(res.mesh.faces, res.patch.faces);
        assert!(res.final_loss.is_finite());
    }

    /// Replays the attack with the public primitives, asserting that the
    /// expression sub-update consumes the identity block produced moments
    /// earlier in the same iteration (and texture consumes both). Any
    /// stale-value scheduling would diverge bitwise.
    #[test]
    fn manual_replica_matches_substep_sequencing() {
        let (morphable, white, attacker, victim) = small_setup();
        let config = small_config(2);
        let res = at3d_p(&config, &white, &morphable, &attacker, &victim).unwrap();

        // Independent replay.
        let patch = extract_patch(&morphable.mean_mesh().unwrap(), &config.region).unwrap();
        let init =
            init_coefficients(&morphable, config.init, &attacker, &victim, config.seed).unwrap();
        let params = config.render.clone().with_coefficients(&init);
        let victim_image = render_face(&morphable, &victim, &config.render).unwrap().image;
        let base_image = {
            let mesh = morphable.synth_mesh(&attacker).unwrap();
            let full = PatchTopology::full(&mesh);
            rasterize(&mesh, &full, &params).unwrap().image
        };
        let sigma: [&[f64]; 3] = [
            &morphable.coeff_std_id,
            &morphable.coeff_std_exp,
            &morphable.coeff_std_tex,
        ];
        let norm = |cs: &[f64], sd: &[f64]| -> Vec<f64> {
            cs.iter().zip(sd).map(|(c, s)| c / s).collect()
        };
        let mut z = [
            norm(&init.alpha, sigma[0]),
            norm(&init.beta, sigma[1]),
            norm(&init.tau, sigma[2]),
        ];
        let z_ref = z.clone();
        let mut adam = [
            AdamState::new(z[0].len(), config.adam),
            AdamState::new(z[1].len(), config.adam),
            AdamState::new(z[2].len(), config.adam),
        ];
        let lr = config.effective_learning_rate();
        let run_forward = |z: &[Vec<f64>; 3]| {
            let coeffs = Coefficients {
                alpha: z[0].iter().zip(sigma[0]).map(|(v, s)| v * s).collect(),
                beta: z[1].iter().zip(sigma[1]).map(|(v, s)| v * s).collect(),
                tau: z[2].iter().zip(sigma[2]).map(|(v, s)| v * s).collect(),
                gamma: init.gamma,
                pose: init.pose,
            };
            let synth = synthesize(&morphable, &coeffs).unwrap();
            let clamp = synth.clamp_active;
            let mesh =
                Mesh::new(synth.positions, synth.colors, morphable.faces.clone()).unwrap();
            let render = rasterize(&mesh, &patch, &params).unwrap();
            let image = composite(&render, &base_image).unwrap();
            let (loss, dl) = attack_loss(&white, &image, &victim_image, config.mode).unwrap();
            (loss, dl, render, mesh, clamp)
        };

        let mut expected_substeps = Vec::new();
        for _ in 0..config.iterations {
            let mut row = [0.0; 3];
            for block in 0..3 {
                let (loss, dl, render, mesh, clamp) = run_forward(&z);
                row[block] = loss;
                let dpatch = composite_backward(&render, &dl).unwrap();
                let g = render_backward(&render, &mesh, &params, &dpatch).unwrap();
                let cg = synthesize_backward(
                    &morphable,
                    g.positions.view(),
                    g.colors.view(),
                    &clamp,
                )
                .unwrap();
                let raw = match block {
                    0 => cg.alpha,
                    1 => cg.beta,
                    _ => cg.tau,
                };
                let gz: Vec<f64> =
                    raw.iter().zip(sigma[block]).map(|(g, s)| g * s).collect();
                adam[block].step(&mut z[block], &gz, lr).unwrap();
                z[block] = project_budget(
                    &z[block],
                    &z_ref[block],
                    config.budget,
                    crate::attack::BudgetSpace::VertexUnits,
                )
                .unwrap();
            }
            expected_substeps.push(row);
        }

        assert_eq!(res.substep_losses, expected_substeps);
        // Also confirm the alpha-substep losses drive the public traces.
        for (k, row) in expected_substeps.iter().enumerate() {
            assert_eq!(res.loss_trace[k], row[0]);
        }
        let final_coeffs = res.coefficients.unwrap();
        let expect_alpha: Vec<f64> =
            z[0].iter().zip(sigma[0]).map(|(v, s)| v * s).collect();
        assert_eq!(final_coeffs.alpha, expect_alpha);
    }

    #[test]
    fn budget_holds_on_every_block() {
        let (morphable, white, attacker, victim) = small_setup();
        let mut config = small_config(6);
        config.budget = 0.4;
        let res = at3d_p(&config, &white, &morphable, &attacker, &victim).unwrap();
        let init =
            init_coefficients(&morphable, config.init, &attacker, &victim, config.seed).unwrap();
        let got = res.coefficients.unwrap();
        let check = |cur: &[f64], start: &[f64], std: &[f64]| {
            for ((c, s), sd) in cur.iter().zip(start).zip(std) {
                assert!((c - s).abs() <= config.budget * sd * (1.0 + 1e-12));
            }
        };
        check(&got.alpha, &init.alpha, &morphable.coeff_std_id);
        check(&got.beta, &init.beta, &morphable.coeff_std_exp);
        check(&got.tau, &init.tau, &morphable.coeff_std_tex);
        assert_eq!(res.loss_trace.len(), 6);
        assert_eq!(res.similarity_trace.len(), 6);
        assert_eq!(res.substep_losses.len(), 6);
    }

    #[test]
    fn repeat_runs_are_bitwise_identical() {
        let (morphable, white, attacker, victim) = small_setup();
        let config = small_config(3);
        let a = at3d_p(&config, &white, &morphable, &attacker, &victim).unwrap();
        let b = at3d_p(&config, &white, &morphable, &attacker, &victim).unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.substep_losses, b.substep_losses);
        assert_eq!(a.composite, b.composite);
        assert_eq!(a.coefficients, b.coefficients);
    }

    #[test]
    fn impersonation_loss_improves_over_short_run() {
        let (morphable, white, attacker, victim) = small_setup();
        let mut config = small_config(40);
        config.render = RenderParams::frontal(32, 32);
        let res = at3d_p(&config, &white, &morphable, &attacker, &victim).unwrap();
        assert!(res.loss_trace.iter().all(|l| l.is_finite()));
        assert!(
            res.final_loss < res.loss_trace[0],
            "final {} vs initial {}",
            res.final_loss,
            res.loss_trace[0]
        );
    }

    #[test]
    fn empty_patch_region_is_rejected() {
        let (morphable, white, attacker, victim) = small_setup();
        let mut config = small_config(1);
        config.region = PatchRegion::Custom {
            boxes: vec![crate::mesh::CustomBox {
                min: [900.0, 900.0, 900.0],
                max: [901.0, 901.0, 901.0],
            }],
        };
        assert!(at3d_p(&config, &white, &morphable, &attacker, &victim).is_err());
    }
}
