//! Real spherical harmonics up to degree 3 for view-dependent surfel color.
//!
//! Basis ordering and signs follow the convention used by most Gaussian
//! splatting code (Condon-Shortley phase folded into the constants). Colors
//! decode as `clamp(sum_k coeff_k * Y_k(dir) + 0.5, 0, 1)`.

use crate::scene::Vec3;

pub const SH_DEGREE: usize = 3;
pub const SH_COEFFS: usize = (SH_DEGREE + 1) * (SH_DEGREE + 1);

/// Per-channel coefficient block, `[channel][basis]`.
pub type ShCoeffs = [[f64; SH_COEFFS]; 3];

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Basis values at a unit direction.
pub fn basis(dir: &Vec3) -> [f64; SH_COEFFS] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        SH_C0,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (2.0 * zz - xx - yy),
        SH_C2[3] * x * z,
        SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3.0 * xx - yy),
        SH_C3[1] * x * y * z,
        SH_C3[2] * y * (4.0 * zz - xx - yy),
        SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        SH_C3[4] * x * (4.0 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3.0 * yy),
    ]
}

/// Partial derivatives of each basis polynomial with respect to (x, y, z),
/// treating the direction components as free coordinates.
pub fn basis_gradient(dir: &Vec3) -> [[f64; 3]; SH_COEFFS] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let c2 = SH_C2;
    let c3 = SH_C3;
    [
        [0.0, 0.0, 0.0],
        [0.0, -SH_C1, 0.0],
        [0.0, 0.0, SH_C1],
        [-SH_C1, 0.0, 0.0],
        [c2[0] * y, c2[0] * x, 0.0],
        [0.0, c2[1] * z, c2[1] * y],
        [-2.0 * c2[2] * x, -2.0 * c2[2] * y, 4.0 * c2[2] * z],
        [c2[3] * z, 0.0, c2[3] * x],
        [2.0 * c2[4] * x, -2.0 * c2[4] * y, 0.0],
        [c3[0] * 6.0 * x * y, c3[0] * (3.0 * xx - 3.0 * yy), 0.0],
        [c3[1] * y * z, c3[1] * x * z, c3[1] * x * y],
        [
            c3[2] * (-2.0 * x * y),
            c3[2] * (4.0 * zz - xx - 3.0 * yy),
            c3[2] * 8.0 * y * z,
        ],
        [
            c3[3] * (-6.0 * x * z),
            c3[3] * (-6.0 * y * z),
            c3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        ],
        [
            c3[4] * (4.0 * zz - 3.0 * xx - yy),
            c3[4] * (-2.0 * x * y),
            c3[4] * 8.0 * x * z,
        ],
        [
            c3[5] * 2.0 * x * z,
            c3[5] * (-2.0 * y * z),
            c3[5] * (xx - yy),
        ],
        [
            c3[6] * (3.0 * xx - 3.0 * yy),
            c3[6] * (-6.0 * x * y),
            0.0,
        ],
    ]
}

/// Unclamped color (`sum + 0.5`) per channel.
pub fn eval_raw(coeffs: &ShCoeffs, dir: &Vec3) -> [f64; 3] {
    let b = basis(dir);
    let mut out = [0.5; 3];
    for (ch, o) in out.iter_mut().enumerate() {
        *o += coeffs[ch].iter().zip(b.iter()).map(|(c, y)| c * y).sum::<f64>();
    }
    out
}

/// Decoded color in `[0, 1]^3`.
pub fn sh_eval(coeffs: &ShCoeffs, dir: &Vec3) -> [f64; 3] {
    eval_raw(coeffs, dir).map(|c| c.clamp(0.0, 1.0))
}

/// Coefficient value that makes the degree-0 term alone decode to `rgb`.
pub fn dc_from_rgb(rgb: f64) -> f64 {
    (rgb - 0.5) / SH_C0
}

/// Backpropagates a color gradient into coefficient and direction gradients.
///
/// `grad_color` is dL/d(clamped color). Channels whose raw value sits outside
/// the open interval (0, 1) are clamped and pass no gradient. Returns the
/// gradient with respect to the (unit) direction vector.
pub fn backward(
    coeffs: &ShCoeffs,
    dir: &Vec3,
    grad_color: [f64; 3],
    grad_coeffs: &mut ShCoeffs,
) -> Vec3 {
    let b = basis(dir);
    let db = basis_gradient(dir);
    let raw = eval_raw(coeffs, dir);
    let mut g_dir = Vec3::zeros();
    for ch in 0..3 {
        if !(raw[ch] > 0.0 && raw[ch] < 1.0) {
            continue;
        }
        let g = grad_color[ch];
        if g == 0.0 {
            continue;
        }
        for k in 0..SH_COEFFS {
            grad_coeffs[ch][k] += g * b[k];
            let c = coeffs[ch][k] * g;
            g_dir.x += c * db[k][0];
            g_dir.y += c * db[k][1];
            g_dir.z += c * db[k][2];
        }
    }
    g_dir
}
