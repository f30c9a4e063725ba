//! Real spherical harmonics, bands 0..=2, evaluated on unit normals.
//!
//! Basis order: [1, y, z, x, xy, yz, 3z^2-1, xz, x^2-y^2] with the standard
//! real-SH normalization constants. Nine coefficients shared across RGB;
//! shading(n) = sum_k gamma_k * Y_k(n). A pure band-0 illumination of
//! 2*sqrt(pi) gives shading exactly 1 everywhere (C0 = 1/(2*sqrt(pi))).

/// sqrt(1/(4 pi))
pub const SH_C0: f64 = 0.282_094_791_773_878;
/// sqrt(3/(4 pi))
pub const SH_C1: f64 = 0.488_602_511_902_920;
/// sqrt(15/(4 pi)) for xy, yz, xz
pub const SH_C2: f64 = 1.092_548_430_592_079;
/// sqrt(5/(16 pi)) for 3z^2 - 1
pub const SH_C20: f64 = 0.315_391_565_252_520;
/// sqrt(15/(16 pi)) for x^2 - y^2
pub const SH_C22: f64 = 0.546_274_215_296_040;

/// The nine basis values at a unit direction.
pub fn sh_basis(n: [f64; 3]) -> [f64; 9] {
    let [x, y, z] = n;
    [
        SH_C0,
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2 * x * y,
        SH_C2 * y * z,
        SH_C20 * (3.0 * z * z - 1.0),
        SH_C2 * x * z,
        SH_C22 * (x * x - y * y),
    ]
}

/// Gradient of sum_k gamma_k Y_k with respect to the direction components.
pub fn sh_shading_grad(n: [f64; 3], gamma: &[f64; 9]) -> [f64; 3] {
    let [x, y, z] = n;
    [
        SH_C1 * gamma[3] + SH_C2 * (gamma[4] * y + gamma[7] * z) + SH_C22 * gamma[8] * 2.0 * x,
        SH_C1 * gamma[1] + SH_C2 * (gamma[4] * x + gamma[5] * z) - SH_C22 * gamma[8] * 2.0 * y,
        SH_C1 * gamma[2] + SH_C2 * (gamma[5] * y + gamma[7] * x) + SH_C20 * gamma[6] * 6.0 * z,
    ]
}

/// shading_i = sum_k gamma_k Y_k(normal_i). Normals must be unit length;
/// rows that are exactly zero (unreferenced vertices) shade to zero.
pub fn sh_shade(normals: ndarray::ArrayView2<f64>, gamma: &[f64; 9]) -> Vec<f64> {
    normals
        .rows()
        .into_iter()
        .map(|r| {
            let n = [r[0], r[1], r[2]];
            if n == [0.0, 0.0, 0.0] {
                return 0.0;
            }
            let basis = sh_basis(n);
            basis.iter().zip(gamma).map(|(b, g)| b * g).sum()
        })
        .collect()
}
