//! Image-space attacks: masked momentum sign updates, optionally averaged
//! over random viewing transforms.
//!
//! The optimized variable is a full screen-space image whose pixels may
//! only change inside a binary patch mask. Each iteration normalizes the
//! loss gradient by its l1 norm, folds it into a momentum accumulator,
//! and takes one signed step on the masked pixels, clamping every channel
//! into the epsilon box around the reference image intersected with the
//! valid [0, 255] range.
//!
//! The transform-averaged variant re-renders the attacker's face at a
//! jittered pose each draw, pastes the optimized pixels over the
//! base-pose patch footprint, scales global brightness, and averages the
//! resulting gradients. The gradient passed to the momentum loop is the
//! full-image pullback (brightness times the clamp gate), so its l1
//! normalization accounts for scene pixels exactly the way the plain
//! attack's does; with a zero-width distribution and one draw per
//! iteration the two attacks produce bit-identical iterates.

use std::time::Instant;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{attack_loss, AttackMode};
use crate::morphable::{Coefficients, MorphableModel, FACE_SCALE};
use crate::recognition::EmbeddingModel;
use crate::render::{rasterize, RenderParams};
use crate::rng::{derive_seed, seeded, uniform, Prng};
use crate::{Error, Result};

/// Stream tag for viewing-transform draws ("EOTJITTR").
pub(crate) const STREAM_EOT: u64 = 0x454f_544a_4954_5452;

/// Configuration for the image-space attacks.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Attack2dConfig {
    pub mode: AttackMode,
    pub iterations: usize,
    /// Per-iteration step in pixel units.
    pub step_size: f64,
    /// Momentum decay; 1 accumulates, 0 disables momentum.
    pub decay: f64,
    /// Componentwise budget around the reference image, pixel units.
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for Attack2dConfig {
    fn default() -> Self {
        Attack2dConfig {
            mode: AttackMode::Impersonate,
            iterations: 400,
            step_size: 1.5,
            decay: 1.0,
            epsilon: 40.0,
            seed: 0,
        }
    }
}

impl Attack2dConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.step_size.is_finite() || self.step_size <= 0.0 {
            return Err(Error::validation("step_size", "must be finite and > 0"));
        }
        if !self.decay.is_finite() || self.decay < 0.0 {
            return Err(Error::validation("decay", "must be finite and >= 0"));
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::validation("epsilon", "must be finite and > 0"));
        }
        Ok(())
    }
}

/// Outcome of an image-space attack.
#[derive(Debug, Clone)]
pub struct Attack2dResult {
    pub image: Array3<f64>,
    pub loss_trace: Vec<f64>,
    pub similarity_trace: Vec<f64>,
    pub final_loss: f64,
    pub final_similarity: f64,
    pub wall_time_secs: f64,
}

fn sign_explicit(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_image_mask(reference: &Array3<f64>, mask: &Array2<u8>) -> Result<()> {
    let (h, w, c) = reference.dim();
    if c != 3 {
        return Err(Error::dim("image channels", 3, c));
    }
    if mask.dim() != (h, w) {
        return Err(Error::dim(
            "mask shape",
            format!("{h}x{w}"),
            format!("{}x{}", mask.nrows(), mask.ncols()),
        ));
    }
    for v in reference.iter() {
        if !v.is_finite() || *v < 0.0 || *v > 255.0 {
            return Err(Error::validation("reference image", "pixels must lie in [0, 255]"));
        }
    }
    for m in mask.iter() {
        if *m > 1 {
            return Err(Error::validation("patch mask", "mask must be binary (0 or 1)"));
        }
    }
    Ok(())
}

/// Shared momentum loop. `gradient_fn` maps the current image to the
/// scalar loss and its full-image gradient; only masked pixels move.
fn momentum_loop(
    config: &Attack2dConfig,
    reference: &Array3<f64>,
    mask: &Array2<u8>,
    mut gradient_fn: impl FnMut(&Array3<f64>) -> Result<(f64, Array3<f64>)>,
) -> Result<Attack2dResult> {
    let start = Instant::now();
    config.validate()?;
    check_image_mask(reference, mask)?;
    let (h, w, _) = reference.dim();

    let mut x = reference.clone();
    let mut g = Array3::<f64>::zeros(reference.raw_dim());
    let mut loss_trace = Vec::with_capacity(config.iterations);
    let mut similarity_trace = Vec::with_capacity(config.iterations);
    let sign = config.mode.loss_sign();

    for iteration in 0..config.iterations {
        let (loss, dx) = gradient_fn(&x)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration,
                context: "image-space attack".to_string(),
                config: serde_json::to_string(config)?,
            });
        }
        if dx.raw_dim() != reference.raw_dim() {
            return Err(Error::dim(
                "image gradient shape",
                format!("{:?}", reference.shape()),
                format!("{:?}", dx.shape()),
            ));
        }
        loss_trace.push(loss);
        similarity_trace.push(loss * sign);

        let l1: f64 = dx.iter().map(|v| v.abs()).sum();
        for (gv, dv) in g.iter_mut().zip(dx.iter()) {
            *gv *= config.decay;
            if l1 > 0.0 {
                *gv += dv / l1;
            }
        }
        for r in 0..h {
            for c in 0..w {
                if mask[[r, c]] == 0 {
                    continue;
                }
                for ch in 0..3 {
                    let idx = [r, c, ch];
                    let lo = (reference[idx] - config.epsilon).max(0.0);
                    let hi = (reference[idx] + config.epsilon).min(255.0);
                    x[idx] = (x[idx] - config.step_size * sign_explicit(g[idx])).clamp(lo, hi);
                }
            }
        }
    }

    let (final_loss, _) = gradient_fn(&x)?;
    Ok(Attack2dResult {
        image: x,
        loss_trace,
        similarity_trace,
        final_loss,
        final_similarity: final_loss * sign,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Masked momentum sign attack directly on the attacker's image.
pub fn mim_2d(
    config: &Attack2dConfig,
    model_white: &EmbeddingModel,
    attacker_image: &Array3<f64>,
    victim_image: &Array3<f64>,
    patch_mask: &Array2<u8>,
) -> Result<Attack2dResult> {
    momentum_loop(config, attacker_image, patch_mask, |x| {
        attack_loss(model_white, x, victim_image, config.mode)
    })
}

/// Random viewing-transform distribution. Widths of zero make every
/// sampled transform exactly the identity.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TransformDistribution {
    /// Half-width of the uniform Euler-angle jitter, radians per axis.
    pub euler_width: f64,
    /// Half-width of the uniform translation jitter as a fraction of the
    /// canonical face scale, per axis.
    pub translation_frac: f64,
    /// Half-width of the uniform brightness factor around 1.
    pub brightness_frac: f64,
}

impl TransformDistribution {
    pub fn standard() -> Self {
        TransformDistribution { euler_width: 0.1, translation_frac: 0.02, brightness_frac: 0.10 }
    }

    pub fn zero() -> Self {
        TransformDistribution { euler_width: 0.0, translation_frac: 0.0, brightness_frac: 0.0 }
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("euler_width", self.euler_width),
            ("translation_frac", self.translation_frac),
            ("brightness_frac", self.brightness_frac),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::validation(name, "must be finite and >= 0"));
            }
        }
        if self.brightness_frac >= 1.0 {
            return Err(Error::validation("brightness_frac", "must be < 1"));
        }
        Ok(())
    }

    /// One transform draw. Consumes exactly seven uniform deviates in a
    /// fixed order so sampling stays reproducible.
    pub fn sample(&self, rng: &mut Prng) -> SampledTransform {
        let mut euler = [0.0; 3];
        for e in euler.iter_mut() {
            *e = uniform(rng, -self.euler_width, self.euler_width);
        }
        let t = self.translation_frac * FACE_SCALE;
        let mut translation = [0.0; 3];
        for tr in translation.iter_mut() {
            *tr = uniform(rng, -t, t);
        }
        let brightness = uniform(rng, 1.0 - self.brightness_frac, 1.0 + self.brightness_frac);
        SampledTransform { euler, translation, brightness }
    }
}

/// One concrete viewing transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledTransform {
    pub euler: [f64; 3],
    pub translation: [f64; 3],
    pub brightness: f64,
}

/// Averages losses and gradients over transform draws.
#[derive(Debug, Clone, Copy)]
pub struct EotEstimator {
    pub distribution: TransformDistribution,
    pub samples: usize,
}

impl EotEstimator {
    pub fn validate(&self) -> Result<()> {
        self.distribution.validate()?;
        if self.samples == 0 {
            return Err(Error::validation("samples", "must be >= 1"));
        }
        Ok(())
    }

    /// Mean loss and mean gradient over `samples` fresh transform draws.
    pub fn average(
        &self,
        rng: &mut Prng,
        mut inner: impl FnMut(&SampledTransform) -> Result<(f64, Array3<f64>)>,
    ) -> Result<(f64, Array3<f64>)> {
        self.validate()?;
        let mut loss_sum = 0.0;
        let mut grad_sum: Option<Array3<f64>> = None;
        for _ in 0..self.samples {
            let t = self.distribution.sample(rng);
            let (loss, grad) = inner(&t)?;
            loss_sum += loss;
            match grad_sum.as_mut() {
                None => grad_sum = Some(grad),
                Some(acc) => *acc += &grad,
            }
        }
        let k = self.samples as f64;
        let mut grad = grad_sum.expect("samples >= 1");
        grad.mapv_inplace(|v| v / k);
        Ok((loss_sum / k, grad))
    }
}

/// Transform-averaged image attack. The patch footprint is fixed at the
/// base pose; each draw re-renders the attacker's face at a jittered pose,
/// pastes the optimized pixels over that footprint, scales brightness,
/// and clamps into [0, 255] before scoring.
#[allow(clippy::too_many_arguments)]
pub fn eot_2d(
    config: &Attack2dConfig,
    model_white: &EmbeddingModel,
    morphable: &MorphableModel,
    attacker: &Coefficients,
    victim_image: &Array3<f64>,
    patch: &crate::mesh::PatchTopology,
    base_render: &RenderParams,
    estimator: &EotEstimator,
) -> Result<Attack2dResult> {
    estimator.validate()?;
    attacker.validate()?;
    let params = base_render.clone().with_coefficients(attacker);
    let mesh = morphable.synth_mesh(attacker)?;
    let full = crate::mesh::PatchTopology::full(&mesh);
    let base = rasterize(&mesh, &full, &params)?;
    let mask = rasterize(&mesh, patch, &params)?.mask;

    let mut rng = seeded(derive_seed(config.seed, STREAM_EOT));
    let (h, w, _) = base.image.dim();
    momentum_loop(config, &base.image, &mask, |x| {
        estimator.average(&mut rng, |t| {
            let mut p = params.clone();
            for i in 0..3 {
                p.pose[i] += t.euler[i];
                p.pose[3 + i] += t.translation[i];
            }
            let scene = rasterize(&mesh, &full, &p)?;
            let mut y = scene.image;
            for r in 0..h {
                for c in 0..w {
                    if mask[[r, c]] == 0 {
                        continue;
                    }
                    for ch in 0..3 {
                        y[[r, c, ch]] = x[[r, c, ch]];
                    }
                }
            }
            // Brightness scale with a clamp gate: saturated pixels stop
            // carrying gradient, matching the clamp convention elsewhere.
            let mut gate = Array3::<f64>::zeros(y.raw_dim());
            for (yv, gv) in y.iter_mut().zip(gate.iter_mut()) {
                let scaled = t.brightness * *yv;
                if scaled < 0.0 {
                    *yv = 0.0;
                } else if scaled > 255.0 {
                    *yv = 255.0;
                } else {
                    *yv = scaled;
                    *gv = 1.0;
                }
            }
            let (loss, dy) = attack_loss(model_white, &y, victim_image, config.mode)?;
            let mut dx = dy;
            for (dv, gv) in dx.iter_mut().zip(gate.iter()) {
                *dv = *gv * t.brightness * *dv;
            }
            Ok((loss, dx))
        })
    })
}
