//! Adversarial attacks on the verification pipeline.
//!
//! Five procedures share one skeleton — forward to a similarity loss,
//! reverse-mode gradient to the attacked parameters, an Adam (or momentum)
//! step, projection back into the perturbation budget:
//!
//! * coefficient-space mesh attack: alternating per-block updates of the
//!   shape, expression, and texture coefficients (`at3d_p`),
//! * direct mesh-space attacks on patch vertex positions and colors,
//!   optionally with geometric regularizers (`at3d_m`, `at3d_ml`),
//! * image-space momentum attacks on masked pixels, optionally averaging
//!   gradients over render-pose and brightness jitter (`mim_2d`, `eot_2d`).
//!
//! Minimizing the loss means driving the embedding cosine up toward a
//! victim (impersonation) or down away from the attacker's own gallery
//! image (dodging).

mod coeff_space;
mod image_space;
mod mesh_space;
mod optimizer;

pub use coeff_space::at3d_p;
pub use image_space::{
    eot_2d, mim_2d, Attack2dConfig, Attack2dResult, EotEstimator, SampledTransform,
    TransformDistribution,
};
pub use mesh_space::{at3d_m, at3d_ml, RegWeights};
pub use optimizer::{project_budget, AdamParams, AdamState, BudgetSpace};

use std::collections::BTreeMap;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::mesh::{Mesh, PatchRegion, PatchTopology};
use crate::morphable::{Coefficients, MorphableModel};
use crate::recognition::{cosine_similarity, embed, embed_backward, verify, EmbeddingModel};
use crate::render::RenderParams;
use crate::rng::{derive_seed, normal, seeded};
use crate::{Error, Result};

/// Attack goal: push the similarity to the compared image down (dodge) or
/// up (impersonate). The loss is the signed similarity, so minimizing
/// serves both goals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackMode {
    Dodge,
    Impersonate,
}

impl AttackMode {
    /// L = sign * similarity.
    pub(crate) fn loss_sign(self) -> f64 {
        match self {
            AttackMode::Dodge => 1.0,
            AttackMode::Impersonate => -1.0,
        }
    }
}

/// Where one coefficient block starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitSource {
    /// Gaussian draw scaled by the per-column prior std.
    Noise,
    /// The attacker's own coefficients.
    Attacker,
    /// The victim's coefficients.
    Victim,
    /// Victim's coefficients with the attacker's illumination and pose
    /// (the distinction from `Victim` lives in the gamma/pose rule below).
    AVictim,
}

/// Initialization per block. Shape covers identity and expression
/// together; texture is independent. Illumination and pose follow the
/// shape source: `Victim` takes the victim's, everything else keeps the
/// attacker's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitStrategy {
    pub shape: InitSource,
    pub texture: InitSource,
}

impl Default for InitStrategy {
    fn default() -> Self {
        InitStrategy { shape: InitSource::AVictim, texture: InitSource::AVictim }
    }
}

/// Configuration shared by the 3D attacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub mode: AttackMode,
    pub iterations: usize,
    /// L-infinity perturbation budget, in the optimized space's units.
    pub budget: f64,
    /// Defaults to 1.5 * budget / iterations when unset.
    pub learning_rate: Option<f64>,
    pub init: InitStrategy,
    pub region: PatchRegion,
    /// Camera template; pose and illumination are overridden per attack.
    pub render: RenderParams,
    pub adam: AdamParams,
    pub seed: u64,
}

impl AttackConfig {
    pub fn effective_learning_rate(&self) -> f64 {
        self.learning_rate
            .unwrap_or(1.5 * self.budget / self.iterations.max(1) as f64)
    }

    /// Full validation, including iterations >= 1.
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::validation("attack_config.iterations", "must be at least 1"));
        }
        self.validate_for_run()
    }

    /// Everything except the iteration count: the attack functions accept
    /// iterations = 0 and return the initialized state, which keeps the
    /// identity reduction exercisable.
    pub(crate) fn validate_for_run(&self) -> Result<()> {
        if !(self.budget >= 0.0 && self.budget.is_finite()) {
            return Err(Error::validation(
                "attack_config.budget",
                format!("must be finite and non-negative, got {}", self.budget),
            ));
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::validation(
                    "attack_config.learning_rate",
                    format!("must be positive, got {lr}"),
                ));
            }
        }
        self.render.validate()
    }
}

/// Output of a 3D attack.
#[derive(Debug, Clone)]
pub struct AttackResult {
    /// Final vertex arrays restricted to the patch faces.
    pub mesh: Mesh,
    /// The patch the attack was allowed to touch.
    pub patch: PatchTopology,
    /// Final composited image.
    pub composite: Array3<f64>,
    /// Final coefficients (coefficient-space attack only).
    pub coefficients: Option<Coefficients>,
    /// Objective value at the start of each iteration.
    pub loss_trace: Vec<f64>,
    /// White-box similarity at the start of each iteration.
    pub similarity_trace: Vec<f64>,
    /// Per-iteration losses observed by each sequential sub-update
    /// (coefficient-space attack only; empty otherwise).
    pub substep_losses: Vec<[f64; 3]>,
    pub final_loss: f64,
    pub final_similarity: f64,
    /// Verification outcome per evaluated model, filled in by evaluation.
    pub success: BTreeMap<String, bool>,
    pub wall_time_secs: f64,
}

/// Signed similarity loss and its image gradient.
///
/// L = +cos for dodging, −cos for impersonation, with `x_b`'s embedding
/// treated as a constant. The returned gradient is dL/dx_star in color
/// units.
pub fn attack_loss(
    model: &EmbeddingModel,
    x_star: &Array3<f64>,
    x_b: &Array3<f64>,
    mode: AttackMode,
) -> Result<(f64, Array3<f64>)> {
    let (e_star, cache) = embed(model, x_star)?;
    let (e_b, _) = embed(model, x_b)?;
    let j = cosine_similarity(&e_star, &e_b)?;
    let s = mode.loss_sign();
    // d cos / d e_star on the unit sphere; the radial part would be
    // annihilated by the normalization backward anyway.
    let dl_de: Vec<f64> = e_b
        .iter()
        .zip(&e_star)
        .map(|(b, y)| s * (b - j * y))
        .collect();
    let grad = embed_backward(model, &cache, &dl_de)?;
    Ok((s * j, grad))
}

// ASCII tag "INITNOIS" for the noise-initialization stream.
const STREAM_INIT_NOISE: u64 = 0x494e_4954_4e4f_4953;

/// Assembles starting coefficients from the attacker's and victim's, per
/// block. Noise blocks draw N(0, coeff_std) with a seed-derived stream, in
/// alpha, beta, tau order.
pub fn init_coefficients(
    model: &MorphableModel,
    strategy: InitStrategy,
    attacker: &Coefficients,
    victim: &Coefficients,
    seed: u64,
) -> Result<Coefficients> {
    attacker.validate()?;
    victim.validate()?;
    let mut rng = seeded(derive_seed(seed, STREAM_INIT_NOISE));
    let mut draw = |std: &[f64]| -> Vec<f64> {
        std.iter().map(|s| normal(&mut rng) * s).collect()
    };
    let (alpha, beta) = match strategy.shape {
        InitSource::Noise => (draw(&model.coeff_std_id), draw(&model.coeff_std_exp)),
        InitSource::Attacker => (attacker.alpha.clone(), attacker.beta.clone()),
        InitSource::Victim | InitSource::AVictim => (victim.alpha.clone(), victim.beta.clone()),
    };
    let tau = match strategy.texture {
        InitSource::Noise => draw(&model.coeff_std_tex),
        InitSource::Attacker => attacker.tau.clone(),
        InitSource::Victim | InitSource::AVictim => victim.tau.clone(),
    };
    let (gamma, pose) = if strategy.shape == InitSource::Victim {
        (victim.gamma, victim.pose)
    } else {
        (attacker.gamma, attacker.pose)
    };
    Ok(Coefficients { alpha, beta, tau, gamma, pose })
}

/// Success table for one attack method across several models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub model: String,
    /// Per-pair verification outcome mapped to attack success.
    pub success: Vec<bool>,
    /// Success percentage over the pairs.
    pub rate: f64,
}

/// Scores final images against each calibrated model. Impersonation
/// succeeds when the adversarial image verifies as the victim; dodging
/// succeeds when it no longer verifies.
pub fn eval_attack(
    pairs: &[(Array3<f64>, Array3<f64>)],
    models: &[(&str, &EmbeddingModel, f64)],
    mode: AttackMode,
) -> Result<Vec<EvalEntry>> {
    let mut table = Vec::with_capacity(models.len());
    for (name, model, delta) in models {
        let mut success = Vec::with_capacity(pairs.len());
        for (x_star, x_b) in pairs {
            let accepted = verify(model, x_star, x_b, *delta)?;
            success.push(match mode {
                AttackMode::Impersonate => accepted,
                AttackMode::Dodge => !accepted,
            });
        }
        let rate = if pairs.is_empty() {
            0.0
        } else {
            100.0 * success.iter().filter(|&&s| s).count() as f64 / pairs.len() as f64
        };
        table.push(EvalEntry { model: name.to_string(), success, rate });
    }
    Ok(table)
}
