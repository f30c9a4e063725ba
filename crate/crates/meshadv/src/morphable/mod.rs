//! Low-dimensional face model: mean shape/texture plus orthonormal linear
//! bases for identity, expression, and texture.
//!
//! Synthesis is linear (mean + basis-weighted offsets) followed by a
//! [0, 255] clamp on colors; the clamp gates texture gradients in the
//! backward pass. Models are generated procedurally from a seed (see
//! `generation`), so attacker/victim identities come with ground-truth
//! coefficients instead of a fitting step.

mod generation;
mod io;

pub use generation::generate_synthetic_model;
pub use io::{load_model, save_model};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::mesh::Mesh;
use crate::rng::{derive_seed, normal, seeded};
use crate::{Error, Result};

/// Identity coefficient count.
pub const DIM_ID: usize = 80;
/// Expression coefficient count.
pub const DIM_EXP: usize = 64;
/// Texture coefficient count.
pub const DIM_TEX: usize = 80;
/// Spherical-harmonic illumination coefficient count (bands 0..=2).
pub const DIM_GAMMA: usize = 9;
/// Pose parameter count: 3 Euler angles (radians) + 3 translation.
pub const DIM_POSE: usize = 6;

/// Canonical face frame: x and y span [-10, 10].
pub const FACE_HALF_EXTENT: f64 = 10.0;
/// Full width of the canonical face in model units.
pub const FACE_SCALE: f64 = 2.0 * FACE_HALF_EXTENT;
/// Frontal-pose translation along +z (camera at the origin looks down +z).
pub const FRONTAL_DISTANCE: f64 = 25.0;

/// Band-0 illumination giving unit shading: 2*sqrt(pi), since the constant
/// SH basis function is 1/(2*sqrt(pi)).
pub const AMBIENT_GAMMA0: f64 = 3.544_907_701_811_032;

/// Linear face model. Basis matrices are (3n)xK with vertex-major rows:
/// row 3*i + c is vertex i, component c (x/y/z for shape, R/G/B for texture).
#[derive(Debug, Clone, PartialEq)]
pub struct MorphableModel {
    pub mean_shape: Array2<f64>,   // n x 3, model units
    pub mean_texture: Array2<f64>, // n x 3, in [0, 255]
    pub basis_id: Array2<f64>,     // 3n x 80, orthonormal columns
    pub basis_exp: Array2<f64>,    // 3n x 64, orthonormal columns
    pub basis_tex: Array2<f64>,    // 3n x 80, orthonormal columns
    pub faces: Vec<[usize; 3]>,
    pub coeff_std_id: Vec<f64>,  // per-column prior scales, positive
    pub coeff_std_exp: Vec<f64>,
    pub coeff_std_tex: Vec<f64>,
    pub seed: u64,
    pub grid_resolution: usize,
}

impl MorphableModel {
    pub fn n_vertices(&self) -> usize {
        self.mean_shape.nrows()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    /// The mean face as a renderable mesh.
    pub fn mean_mesh(&self) -> Result<Mesh> {
        Mesh::new(
            self.mean_shape.clone(),
            self.mean_texture.clone(),
            self.faces.clone(),
        )
    }

    /// Synthesizes and packages the result as a mesh with the model's faces.
    pub fn synth_mesh(&self, c: &Coefficients) -> Result<Mesh> {
        let out = synthesize(self, c)?;
        Mesh::new(out.positions, out.colors, self.faces.clone())
    }
}

/// One identity/appearance point in the model's coefficient space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub alpha: Vec<f64>, // identity, 80
    pub beta: Vec<f64>,  // expression, 64
    pub tau: Vec<f64>,   // texture, 80
    pub gamma: [f64; DIM_GAMMA],
    pub pose: [f64; DIM_POSE], // Euler XYZ radians, then translation
}

impl Coefficients {
    pub fn zeros() -> Self {
        Coefficients {
            alpha: vec![0.0; DIM_ID],
            beta: vec![0.0; DIM_EXP],
            tau: vec![0.0; DIM_TEX],
            gamma: [0.0; DIM_GAMMA],
            pose: [0.0; DIM_POSE],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.len() != DIM_ID {
            return Err(Error::dim("alpha length", DIM_ID, self.alpha.len()));
        }
        if self.beta.len() != DIM_EXP {
            return Err(Error::dim("beta length", DIM_EXP, self.beta.len()));
        }
        if self.tau.len() != DIM_TEX {
            return Err(Error::dim("tau length", DIM_TEX, self.tau.len()));
        }
        let finite = self
            .alpha
            .iter()
            .chain(&self.beta)
            .chain(&self.tau)
            .chain(&self.gamma)
            .chain(&self.pose)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::validation("coefficients", "non-finite entry"));
        }
        Ok(())
    }
}

/// Output of `synthesize`. `clamp_active` marks color entries whose
/// pre-clamp value fell outside [0, 255]; gradients are zero there.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub positions: Array2<f64>,
    pub colors: Array2<f64>,
    pub clamp_active: Array2<bool>,
}

/// Gradients with respect to the three optimizable coefficient blocks.
#[derive(Debug, Clone)]
pub struct CoeffGrads {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub tau: Vec<f64>,
}

/// positions = mean_shape + reshape(B_id a + B_exp b);
/// colors = clamp_[0,255](mean_texture + reshape(B_tex t)).
pub fn synthesize(model: &MorphableModel, c: &Coefficients) -> Result<SynthOutput> {
    c.validate()?;
    let n = model.n_vertices();
    if model.basis_id.ncols() != c.alpha.len() {
        return Err(Error::dim(
            "basis_id columns",
            c.alpha.len(),
            model.basis_id.ncols(),
        ));
    }
    if model.basis_exp.ncols() != c.beta.len() {
        return Err(Error::dim(
            "basis_exp columns",
            c.beta.len(),
            model.basis_exp.ncols(),
        ));
    }
    if model.basis_tex.ncols() != c.tau.len() {
        return Err(Error::dim(
            "basis_tex columns",
            c.tau.len(),
            model.basis_tex.ncols(),
        ));
    }

    let shape_off = model.basis_id.dot(&ArrayView1::from(&c.alpha[..]))
        + model.basis_exp.dot(&ArrayView1::from(&c.beta[..]));
    let tex_off = model.basis_tex.dot(&ArrayView1::from(&c.tau[..]));

    let mut positions = model.mean_shape.clone();
    let mut colors = model.mean_texture.clone();
    let mut clamp_active = Array2::from_elem((n, 3), false);
    for i in 0..n {
        for k in 0..3 {
            positions[[i, k]] += shape_off[3 * i + k];
            let pre = colors[[i, k]] + tex_off[3 * i + k];
            if pre < 0.0 || pre > 255.0 {
                clamp_active[[i, k]] = true;
            }
            colors[[i, k]] = pre.clamp(0.0, 255.0);
        }
    }
    Ok(SynthOutput {
        positions,
        colors,
        clamp_active,
    })
}

/// Transpose-multiplies upstream gradients back to coefficient blocks:
/// da = B_id^T vec(dpos), db = B_exp^T vec(dpos),
/// dt = B_tex^T (vec(dcol) gated to zero where the clamp was active).
pub fn synthesize_backward(
    model: &MorphableModel,
    dl_dpositions: ArrayView2<f64>,
    dl_dcolors: ArrayView2<f64>,
    clamp_active: &Array2<bool>,
) -> Result<CoeffGrads> {
    let n = model.n_vertices();
    for (name, arr) in [
        ("dl_dpositions", &dl_dpositions),
        ("dl_dcolors", &dl_dcolors),
    ] {
        if arr.dim() != (n, 3) {
            return Err(Error::dim(
                name,
                format!("{n}x3"),
                format!("{}x{}", arr.nrows(), arr.ncols()),
            ));
        }
    }
    if clamp_active.dim() != (n, 3) {
        return Err(Error::dim(
            "clamp_active",
            format!("{n}x3"),
            format!("{}x{}", clamp_active.nrows(), clamp_active.ncols()),
        ));
    }

    let mut vpos = Array1::zeros(3 * n);
    let mut vcol = Array1::zeros(3 * n);
    for i in 0..n {
        for k in 0..3 {
            vpos[3 * i + k] = dl_dpositions[[i, k]];
            if !clamp_active[[i, k]] {
                vcol[3 * i + k] = dl_dcolors[[i, k]];
            }
        }
    }
    Ok(CoeffGrads {
        alpha: model.basis_id.t().dot(&vpos).to_vec(),
        beta: model.basis_exp.t().dot(&vpos).to_vec(),
        tau: model.basis_tex.t().dot(&vcol).to_vec(),
    })
}

const STREAM_IDENTITY: u64 = 0x4944_454e_5449_5459; // "IDENTITY"

/// Draws one identity: zero-mean Gaussian coefficients with the model's
/// per-column prior scales, ambient illumination, frontal pose.
pub fn sample_identity(model: &MorphableModel, seed: u64) -> Coefficients {
    let mut rng = seeded(derive_seed(seed, STREAM_IDENTITY));
    let draw = |rng: &mut crate::rng::Prng, stds: &[f64]| -> Vec<f64> {
        stds.iter().map(|s| normal(rng) * s).collect()
    };
    let alpha = draw(&mut rng, &model.coeff_std_id);
    let beta = draw(&mut rng, &model.coeff_std_exp);
    let tau = draw(&mut rng, &model.coeff_std_tex);
    let mut gamma = [0.0; DIM_GAMMA];
    gamma[0] = AMBIENT_GAMMA0;
    Coefficients {
        alpha,
        beta,
        tau,
        gamma,
        pose: [0.0, 0.0, 0.0, 0.0, 0.0, FRONTAL_DISTANCE],
    }
}

pub(crate) fn flatten_rows(view: ArrayView2<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(view.len());
    for row in view.rows() {
        out.extend(row.iter().copied());
    }
    out
}
