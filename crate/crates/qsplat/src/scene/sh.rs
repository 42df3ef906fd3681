//! Real spherical-harmonics color evaluation, 3D-GS convention:
//! the DC coefficient is scaled by the degree-0 basis constant, a 0.5
//! offset is added, and channels are clamped to [0, 1].

use nalgebra::Vector3;

pub const SH_C0: f64 = 0.28209479177387814;
const SH_C1: f64 = 0.4886025119029199;
const SH_C2: [f64; 5] = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
];
const SH_C3: [f64; 7] = [
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
];

/// Evaluate SH color for a unit view direction. The coefficient count
/// determines the degree ((d+1)^2 entries, d in 0..=3); degree 0 ignores
/// the direction entirely.
pub fn evaluate_color(sh_coeffs: &[[f64; 3]], direction: &Vector3<f64>) -> [f64; 3] {
    let mut rgb = [0.0f64; 3];
    for ch in 0..3 {
        rgb[ch] = SH_C0 * sh_coeffs[0][ch];
    }
    let n = sh_coeffs.len();
    if n >= 4 {
        let (x, y, z) = (direction.x, direction.y, direction.z);
        for ch in 0..3 {
            rgb[ch] += -SH_C1 * y * sh_coeffs[1][ch] + SH_C1 * z * sh_coeffs[2][ch]
                - SH_C1 * x * sh_coeffs[3][ch];
        }
        if n >= 9 {
            let (xx, yy, zz) = (x * x, y * y, z * z);
            let (xy, yz, xz) = (x * y, y * z, x * z);
            for ch in 0..3 {
                rgb[ch] += SH_C2[0] * xy * sh_coeffs[4][ch]
                    + SH_C2[1] * yz * sh_coeffs[5][ch]
                    + SH_C2[2] * (2.0 * zz - xx - yy) * sh_coeffs[6][ch]
                    + SH_C2[3] * xz * sh_coeffs[7][ch]
                    + SH_C2[4] * (xx - yy) * sh_coeffs[8][ch];
            }
            if n >= 16 {
                for ch in 0..3 {
                    rgb[ch] += SH_C3[0] * y * (3.0 * xx - yy) * sh_coeffs[9][ch]
                        + SH_C3[1] * xy * z * sh_coeffs[10][ch]
                        + SH_C3[2] * y * (4.0 * zz - xx - yy) * sh_coeffs[11][ch]
                        + SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy) * sh_coeffs[12][ch]
                        + SH_C3[4] * x * (4.0 * zz - xx - yy) * sh_coeffs[13][ch]
                        + SH_C3[5] * z * (xx - yy) * sh_coeffs[14][ch]
                        + SH_C3[6] * x * (xx - 3.0 * yy) * sh_coeffs[15][ch];
                }
            }
        }
    }
    for v in &mut rgb {
        *v = (*v + 0.5).clamp(0.0, 1.0);
    }
    rgb
}
