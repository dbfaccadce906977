//! Real orthonormal spherical harmonics.

use std::f64::consts::PI;

use crate::geometry::Vec3;

/// Number of harmonics with degree at most `lmax`.
pub fn basis_len(lmax: usize) -> usize {
    (lmax + 1) * (lmax + 1)
}

/// Flat index of `(l, m)`, `-l <= m <= l`.
pub fn index(l: usize, m: i64) -> usize {
    ((l * l + l) as i64 + m) as usize
}

/// All `Y_lm` values at the unit vector `p`, in [`index`] order.
pub fn eval(lmax: usize, p: Vec3) -> Vec<f64> {
    let z = p[2].clamp(-1.0, 1.0);
    let phi = p[1].atan2(p[0]);
    let s = (1.0 - z * z).max(0.0).sqrt();
    let mut out = vec![0.0; basis_len(lmax)];
    // plm[l] for the current m, unnormalized associated Legendre values
    let mut pmm = 1.0;
    for m in 0..=lmax {
        if m > 0 {
            pmm *= -((2 * m - 1) as f64) * s;
        }
        let mut prev2 = 0.0;
        let mut prev = pmm;
        for l in m..=lmax {
            let plm = if l == m {
                pmm
            } else if l == m + 1 {
                z * (2 * m + 1) as f64 * pmm
            } else {
                ((2 * l - 1) as f64 * z * prev - (l + m - 1) as f64 * prev2) / (l - m) as f64
            };
            if l > m {
                prev2 = prev;
                prev = plm;
            }
            let k = norm(l, m);
            let base = l * l + l;
            if m == 0 {
                out[base] = k * plm;
            } else {
                let mf = m as f64;
                out[base + m] = std::f64::consts::SQRT_2 * k * (mf * phi).cos() * plm;
                out[base - m] = std::f64::consts::SQRT_2 * k * (mf * phi).sin() * plm;
            }
        }
    }
    out
}

fn norm(l: usize, m: usize) -> f64 {
    // (l-m)!/(l+m)! as a running product
    let mut ratio = 1.0;
    for k in (l - m + 1)..=(l + m) {
        ratio /= k as f64;
    }
    ((2 * l + 1) as f64 / (4.0 * PI) * ratio).sqrt()
}
