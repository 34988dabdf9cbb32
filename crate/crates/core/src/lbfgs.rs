//! Limited-memory BFGS for maximization, with backtracking line search.
//!
//! The line search only accepts points satisfying the sufficient-increase
//! condition, so the returned value is never below the starting value. An
//! optional initial inverse-Hessian operator replaces the usual scaled
//! identity; the EM driver passes a factorized curvature matrix here.

use std::collections::VecDeque;

use crate::{Error, Result};

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            memory: 100,
            max_iters: 1000,
            grad_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    MaxIterations,
    /// No step along the current direction increased the objective.
    LineSearch,
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

/// Maximize `f` from `init`; returns the argmax estimate and its value.
pub fn lbfgs_maximize<F>(f: F, init: Vec<f64>, memory: usize, max_iters: usize) -> Result<(Vec<f64>, f64)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let opts = LbfgsOptions {
        memory,
        max_iters,
        ..LbfgsOptions::default()
    };
    let out = lbfgs_maximize_with(f, init, opts, None)?;
    Ok((out.x, out.value))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Full-control variant. `h0`, when given, applies an approximation of the
/// inverse of `−∇²f` to a vector and is used unscaled as the initial matrix
/// of every two-loop recursion.
pub fn lbfgs_maximize_with<F>(
    mut f: F,
    init: Vec<f64>,
    opts: LbfgsOptions,
    h0: Option<&dyn Fn(&[f64]) -> Vec<f64>>,
) -> Result<LbfgsOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (mut fx, mut g) = f(&init)?;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("objective is not finite at the starting point"));
    }
    let mut x = init;
    let mut evaluations = 1;
    // pairs (s, y) with y the change in the gradient of −f
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let termination = loop {
        if norm(&g) < opts.grad_tol {
            break Termination::GradientTolerance;
        }
        if iterations >= opts.max_iters {
            break Termination::MaxIterations;
        }
        let mut dir = direction(&g, &hist, h0);
        let mut slope = dot(&g, &dir);
        if !(slope > 0.0) || dir.iter().any(|v| !v.is_finite()) {
            hist.clear();
            dir = direction(&g, &hist, h0);
            slope = dot(&g, &dir);
            if !(slope > 0.0) {
                break Termination::LineSearch;
            }
        }
        let mut step = if hist.is_empty() && h0.is_none() {
            (1.0 / norm(&g)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            evaluations += 1;
            if let Ok((ft, gt)) = f(&trial) {
                if ft.is_finite() && gt.iter().all(|v| v.is_finite()) && ft >= fx + ARMIJO * step * slope && ft >= fx {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        iterations += 1;
        let Some((xn, fnew, gn)) = accepted else {
            if hist.is_empty() {
                break Termination::LineSearch;
            }
            hist.clear();
            continue;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g.iter().zip(&gn).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let improved = fnew > fx;
        x = xn;
        fx = fnew;
        g = gn;
        if !improved {
            break Termination::LineSearch;
        }
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if hist.len() == opts.memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
    };
    Ok(LbfgsOutcome {
        x,
        value: fx,
        iterations,
        evaluations,
        termination,
    })
}

/// Two-loop recursion: approximately `(−∇²f)^{-1} g`.
fn direction(g: &[f64], hist: &VecDeque<(Vec<f64>, Vec<f64>, f64)>, h0: Option<&dyn Fn(&[f64]) -> Vec<f64>>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(hist.len());
    for (s, y, rho) in hist.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    let mut r = match h0 {
        Some(h) => h(&q),
        None => {
            let scale = hist
                .back()
                .map(|(s, y, _)| dot(s, y) / dot(y, y))
                .unwrap_or(1.0);
            q.iter().map(|v| v * scale).collect()
        }
    };
    for ((s, y, rho), a) in hist.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &r);
        for (ri, si) in r.iter_mut().zip(s) {
            *ri += (a - b) * si;
        }
    }
    r
}
