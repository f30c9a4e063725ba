//! Adam and the perturbation-budget projection.
//!
//! Every attack is projected gradient descent in some parameter space:
//! Adam proposes a step, then the deviation from the reference point is
//! clamped componentwise back into the L-infinity budget ball. The ball's
//! units depend on the space: coefficient deviations are measured in units
//! of the prior's per-column standard deviation, vertex positions in model
//! units, colors in [0, 255] color units.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Adam hyperparameters; defaults are the standard published values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second-moment accumulators for one parameter block.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step_count: u64,
    params: AdamParams,
}

impl AdamState {
    pub fn new(len: usize, params: AdamParams) -> AdamState {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], step_count: 0, params }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One bias-corrected descent step:
    /// m ← β1·m + (1−β1)·g, v ← β2·v + (1−β2)·g², then
    /// p ← p − lr · (m / (1−β1^t)) / (√(v / (1−β2^t)) + ε).
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::dim("adam parameter block", self.m.len(), params.len()));
        }
        if grads.len() != self.m.len() {
            return Err(Error::dim("adam gradient block", self.m.len(), grads.len()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.params.beta1.powi(t);
        let c2 = 1.0 - self.params.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.params.beta1 * self.m[i] + (1.0 - self.params.beta1) * g;
            self.v[i] = self.params.beta2 * self.v[i] + (1.0 - self.params.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.params.epsilon);
        }
        Ok(())
    }
}

/// Which units the budget ball lives in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BudgetSpace<'a> {
    /// Deviation measured in units of the per-coordinate prior std.
    CoeffNormalized { coeff_std: &'a [f64] },
    /// Deviation measured directly in model units.
    VertexUnits,
    /// Deviation measured directly in color units.
    ColorUnits,
}

/// Componentwise L-infinity projection: clamps current − reference into
/// [−η·u, +η·u] per coordinate (u = coeff_std in the normalized space,
/// 1 otherwise) and re-adds the reference.
pub fn project_budget(
    current: &[f64],
    reference: &[f64],
    eta: f64,
    space: BudgetSpace,
) -> Result<Vec<f64>> {
    if current.len() != reference.len() {
        return Err(Error::dim("budget reference", current.len(), reference.len()));
    }
    if let BudgetSpace::CoeffNormalized { coeff_std } = space {
        if coeff_std.len() != current.len() {
            return Err(Error::dim("coeff_std", current.len(), coeff_std.len()));
        }
    }
    let mut out = current.to_vec();
    project_budget_in_place(&mut out, reference, eta, space);
    Ok(out)
}

pub(crate) fn project_budget_in_place(
    current: &mut [f64],
    reference: &[f64],
    eta: f64,
    space: BudgetSpace,
) {
    for i in 0..current.len() {
        let unit = match space {
            BudgetSpace::CoeffNormalized { coeff_std } => coeff_std[i],
            BudgetSpace::VertexUnits | BudgetSpace::ColorUnits => 1.0,
        };
        let bound = eta * unit;
        current[i] = reference[i] + (current[i] - reference[i]).clamp(-bound, bound);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, seeded, uniform};
    use proptest::prelude::*;

    #[test]
    fn zero_gradient_leaves_params_and_moments_unchanged() {
        let mut st = AdamState::new(3, AdamParams::default());
        let mut p = vec![1.0, -2.0, 0.5];
        let before = p.clone();
        st.step(&mut p, &[0.0, 0.0, 0.0], 0.1).unwrap();
        assert_eq!(p, before);
        assert!(st.m.iter().all(|&v| v == 0.0));
        assert!(st.v.iter().all(|&v| v == 0.0));
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_matches_hand_evaluated_recurrence() {
        // t=1: m_hat = g, v_hat = g*g, so p -= lr * g / (|g| + eps).
        let mut st = AdamState::new(1, AdamParams::default());
        let mut p = vec![0.0];
        st.step(&mut p, &[1.0], 0.015).unwrap();
        let expected = -0.015 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((p[0] + 0.015).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut st = AdamState::new(1, AdamParams::default());
        let mut w = vec![1.0];
        for _ in 0..100 {
            let g = [2.0 * w[0]];
            st.step(&mut w, &g, 0.05).unwrap();
        }
        assert!(w[0].abs() < 0.1, "w = {}", w[0]);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let mut st = AdamState::new(2, AdamParams::default());
        let mut p = vec![0.0; 3];
        assert!(st.step(&mut p, &[0.0; 3], 0.1).is_err());
        let mut p2 = vec![0.0; 2];
        assert!(st.step(&mut p2, &[0.0; 3], 0.1).is_err());
    }

    #[test]
    fn projection_identities() {
        let r = vec![1.0, -2.0, 3.0];
        let same = project_budget(&r, &r, 0.5, BudgetSpace::VertexUnits).unwrap();
        assert_eq!(same, r);

        let cur = vec![1.0 + 1.0, -2.0, 3.0 - 0.2];
        let out = project_budget(&cur, &r, 0.5, BudgetSpace::VertexUnits).unwrap();
        assert_eq!(out, vec![1.5, -2.0, 2.8]);

        // Deviation of 2 eta clamps to exactly eta.
        let cur2 = vec![r[0] + 1.0];
        let out2 = project_budget(&cur2, &r[..1], 0.5, BudgetSpace::VertexUnits).unwrap();
        assert_eq!(out2[0], r[0] + 0.5);
    }

    #[test]
    fn normalized_space_scales_by_coeff_std() {
        let std = vec![2.0, 0.5];
        let reference = vec![0.0, 0.0];
        let cur = vec![10.0, 10.0];
        let out = project_budget(
            &cur,
            &reference,
            3.0,
            BudgetSpace::CoeffNormalized { coeff_std: &std },
        )
        .unwrap();
        assert_eq!(out, vec![6.0, 1.5]);

        // Projecting raw coordinates with the std-scaled ball equals
        // projecting std-normalized coordinates with a unit ball.
        let norm_cur: Vec<f64> = cur.iter().zip(&std).map(|(c, s)| c / s).collect();
        let norm_ref = vec![0.0, 0.0];
        let norm_out = project_budget(&norm_cur, &norm_ref, 3.0, BudgetSpace::VertexUnits).unwrap();
        for i in 0..2 {
            assert!((norm_out[i] * std[i] - out[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_matches_naive_loop_on_random_tensors() {
        let mut rng = seeded(70);
        for _ in 0..20 {
            let n = 1 + (uniform(&mut rng, 0.0, 40.0) as usize);
            let cur: Vec<f64> = (0..n).map(|_| normal(&mut rng) * 5.0).collect();
            let reference: Vec<f64> = (0..n).map(|_| normal(&mut rng) * 5.0).collect();
            let std: Vec<f64> = (0..n).map(|_| uniform(&mut rng, 0.1, 4.0)).collect();
            let eta = uniform(&mut rng, 0.0, 2.0);
            let got = project_budget(
                &cur,
                &reference,
                eta,
                BudgetSpace::CoeffNormalized { coeff_std: &std },
            )
            .unwrap();
            for i in 0..n {
                let dev = cur[i] - reference[i];
                let b = eta * std[i];
                let want = reference[i] + dev.max(-b).min(b);
                assert_eq!(got[i], want);
            }
        }
    }

    proptest! {
        #[test]
        fn projected_deviation_never_exceeds_budget(
            cur in proptest::collection::vec(-100.0f64..100.0, 1..30),
            shift in proptest::collection::vec(-100.0f64..100.0, 1..30),
            eta in 0.0f64..10.0,
        ) {
            let n = cur.len().min(shift.len());
            let reference: Vec<f64> = cur[..n]
                .iter()
                .zip(&shift[..n])
                .map(|(c, s)| c + s)
                .collect();
            let out = project_budget(&cur[..n], &reference, eta, BudgetSpace::VertexUnits).unwrap();
            for i in 0..n {
                prop_assert!((out[i] - reference[i]).abs() <= eta + 1e-12);
                // Projection never overshoots past the original value.
                let dev = (cur[i] - reference[i]).abs();
                prop_assert!((out[i] - reference[i]).abs() <= dev + 1e-12);
            }
        }
    }
}
