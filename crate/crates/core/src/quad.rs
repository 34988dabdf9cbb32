//! Numerical integration used by the test oracles.
//!
//! Production code never integrates; these routines exist so that closed
//! forms elsewhere in the crate can be checked against brute force.

use std::num::NonZeroUsize;

use gauss_quad::hermite::GaussHermite;
use gauss_quad::legendre::GaussLegendre;

use crate::{Error, Result};

const MAX_PANELS: usize = 20_000;

fn rule(n: usize) -> GaussLegendre {
    GaussLegendre::new(NonZeroUsize::new(n).expect("non-zero degree"))
}

/// Adaptive integral of `f` over `[a, b]`.
///
/// Each panel is estimated with 10- and 20-point Gauss–Legendre rules; a
/// panel is accepted when the two agree to `rel_tol` (relative to the running
/// total) or `abs_tol`, otherwise it is bisected.
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<f64> {
    let lo = rule(10);
    let hi = rule(20);
    let coarse_total = hi.integrate(a, b, &f);
    let mut stack = vec![(a, b, 0u32)];
    let mut total = 0.0f64;
    let mut panels = 0usize;
    while let Some((l, r, depth)) = stack.pop() {
        panels += 1;
        if panels > MAX_PANELS {
            return Err(Error::Quadrature(format!(
                "more than {MAX_PANELS} panels on [{a}, {b}]"
            )));
        }
        let p = lo.integrate(l, r, &f);
        let q = hi.integrate(l, r, &f);
        if !q.is_finite() {
            return Err(Error::Quadrature(format!("non-finite integrand on [{l}, {r}]")));
        }
        let scale = coarse_total.abs().max(total.abs());
        if (p - q).abs() <= (rel_tol * scale).max(abs_tol) || depth >= 60 {
            total += q;
        } else {
            let mid = 0.5 * (l + r);
            stack.push((mid, r, depth + 1));
            stack.push((l, mid, depth + 1));
        }
    }
    Ok(total)
}

/// Integral of `f` over `[0, ∞)` via the map `x = scale·u/(1−u)`.
pub fn integrate_half_line<F: Fn(f64) -> f64>(
    f: F,
    scale: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<f64> {
    integrate(
        |u| {
            let w = 1.0 - u;
            let x = scale * u / w;
            let v = f(x) * scale / (w * w);
            if v.is_finite() {
                v
            } else {
                0.0
            }
        },
        0.0,
        1.0,
        rel_tol,
        abs_tol,
    )
}

/// Gauss–Hermite nodes and weights for `∫ g(x) e^{−x²} dx`.
pub fn hermite_rule(n: usize) -> Vec<(f64, f64)> {
    GaussHermite::new(NonZeroUsize::new(n).expect("non-zero degree"))
        .as_node_weight_pairs()
        .to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_and_peaked_integrands() {
        let v = integrate(|x| x * x, 0.0, 3.0, 1e-12, 0.0).unwrap();
        assert!((v - 9.0).abs() < 1e-12);
        // narrow Gaussian bump, forces refinement
        let s = 1e-3;
        let v = integrate(|x| (-(x - 0.3) * (x - 0.3) / (2.0 * s * s)).exp(), 0.0, 1.0, 1e-10, 0.0)
            .unwrap();
        let exact = s * (2.0 * std::f64::consts::PI).sqrt();
        assert!((v - exact).abs() / exact < 1e-9);
    }

    #[test]
    fn half_line_gamma_moments() {
        // ∫ x^2 e^{-x} = 2
        let v = integrate_half_line(|x| x * x * (-x).exp(), 2.0, 1e-12, 0.0).unwrap();
        assert!((v - 2.0).abs() < 1e-10);
    }

    #[test]
    fn hermite_normalizes() {
        let total: f64 = hermite_rule(12).iter().map(|&(_, w)| w).sum();
        assert!((total - std::f64::consts::PI.sqrt()).abs() < 1e-13);
    }
}
