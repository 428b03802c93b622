//! Shared numeric tolerances and standard-normal helpers.
//!
//! Every tolerance used by the geometric and linear-algebra routines lives
//! here so that they can be audited in one place.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Geometric equality tolerance (unit norms, points on planes, symmetry).
pub const GEOM_TOL: f64 = 1e-9;
/// Distances at or below this are treated as coincident points.
pub const DEGENERACY_TOL: f64 = 1e-12;
/// Smallest eigenvalue allowed in a belief covariance.
pub const EIGEN_FLOOR: f64 = 1e-12;
/// Smallest diagonal variance accepted for Mahalanobis lookups.
pub const MIN_VARIANCE: f64 = 1e-9;
/// Beyond this dimension the top eigenvector is found by power iteration.
pub const DENSE_EIGEN_MAX_DIM: usize = 32;
pub const POWER_MAX_ITERS: usize = 100;
pub const POWER_TOL: f64 = 1e-10;
/// Below this argument `log Φ` and the inverse Mills ratio switch to the
/// asymptotic tail expansion.
pub const TAIL_SWITCH: f64 = -8.0;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF Φ.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

/// Sum `1 - 1/z² + 3/z⁴ - 15/z⁶ + …` such that `Φ(z) ≈ φ(z)/(-z) · S` for
/// large negative `z`. Truncated after the terms stop shrinking or 16 terms.
fn tail_series(z: f64) -> f64 {
    let inv_z2 = 1.0 / (z * z);
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..=16 {
        let next = -term * (2 * k - 1) as f64 * inv_z2;
        if next.abs() >= term.abs() {
            break;
        }
        term = next;
        sum += term;
    }
    sum
}

/// Numerically stable `log Φ(z)`.
pub fn log_normal_cdf(z: f64) -> f64 {
    if z < TAIL_SWITCH {
        -0.5 * z * z - LN_SQRT_2PI - (-z).ln() + tail_series(z).ln()
    } else if z > 5.0 {
        (-normal_cdf(-z)).ln_1p()
    } else {
        normal_cdf(z).ln()
    }
}

/// Inverse Mills ratio `φ(z)/Φ(z)`, i.e. the derivative of `log Φ` at `z`.
pub fn inv_mills(z: f64) -> f64 {
    if z < TAIL_SWITCH {
        -z / tail_series(z)
    } else {
        normal_pdf(z) / normal_cdf(z)
    }
}

/// Binary entropy in bits.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |x: f64| if x <= 0.0 { 0.0 } else { -x * x.log2() };
    term(p) + term(1.0 - p)
}
