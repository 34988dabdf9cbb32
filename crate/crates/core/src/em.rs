//! Variational EM.
//!
//! Each iteration (1) recomputes the E-step reweighting from the current
//! coefficients, (2) maximizes `Q = ℓ̲ − γᵀΛ̃γ/2` jointly over coefficients,
//! variational means and log-variances by preconditioned L-BFGS, and
//! (3) moves `ω` to its closed-form optimum.
//!
//! The E-step quadratic is a tangent minorant of `−penalty`, so every step
//! that increases `Q` also increases `F = ℓ̲ − penalty`; `F` is what the
//! trace records. A step that would lower `F` through rounding is rejected
//! and ends the fit.

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::lbfgs::{lbfgs_maximize_with, LbfgsOptions};
use crate::model::{self, curvature, Design, FitState, Layout, ModelInputs};
use crate::priors::{assemble_precision, estep_weights, penalty, PriorSpec};
use crate::rng::{stream_rng, Stream};
use crate::tree::PartitionTree;
use crate::{Error, Result};

/// Floor for the variance components.
pub const OMEGA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_em_iters: usize,
    /// Total quasi-Newton iterations across all EM iterations.
    pub max_inner_iters: usize,
    /// Quasi-Newton iterations per EM iteration.
    pub inner_iters_per_em: usize,
    pub lbfgs_memory: usize,
    /// Stop when `‖β^(t) − β^(t−1)‖ < conv_tol`.
    pub conv_tol: f64,
    pub seed: u64,
    /// Standard deviation of the random coefficient initialization.
    pub init_scale: f64,
    /// Distinguishes random initializations under one seed.
    pub init_index: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_em_iters: 50,
            max_inner_iters: 1000,
            inner_iters_per_em: 50,
            lbfgs_memory: 100,
            conv_tol: 1e-6,
            seed: 0,
            init_scale: 0.1,
            init_index: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_em_iters == 0 || self.max_inner_iters == 0 || self.inner_iters_per_em == 0 || self.lbfgs_memory == 0 {
            return Err(Error::arg("EM iteration limits and memory must be positive"));
        }
        if !(self.conv_tol > 0.0) || !(self.init_scale >= 0.0) {
            return Err(Error::arg("conv_tol must be positive and init_scale non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// `F = ℓ̲ − penalty` after the iteration.
    pub objective: f64,
    /// `‖β^(t) − β^(t−1)‖`.
    pub delta_beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub state: FitState,
    pub beta_hat: Vec<f64>,
    /// `F` at the initial state.
    pub initial_objective: f64,
    pub trace: Vec<TraceEntry>,
    pub converged: bool,
    pub iterations: usize,
    pub inner_iterations: usize,
}

/// Closed-form maximizer of the bound over `ω`, summing non-corner entries.
pub fn omega_fixed_point(state: &FitState) -> [f64; 3] {
    let avg = |z: &[f64], k: &[f64], old: f64| {
        if z.is_empty() {
            return old;
        }
        let s: Vec<f64> = z.iter().zip(k).map(|(a, b)| a * a + b.exp()).collect();
        (model::pairwise_sum(&s) / z.len() as f64).max(OMEGA_FLOOR)
    };
    [
        (state.zeta_a * state.zeta_a + state.k_a.exp()).max(OMEGA_FLOOR),
        avg(&state.zeta_b, &state.k_b, state.omega[1]),
        avg(&state.zeta_c, &state.k_c, state.omega[2]),
    ]
}

/// `F = ℓ̲ − penalty`, the quantity EM increases.
pub fn em_objective(inputs: &ModelInputs, state: &FitState, prior: &PriorSpec, tree: Option<&PartitionTree>) -> Result<f64> {
    Ok(model::gva_lower_bound(inputs, state)? - penalty(&state.gamma, prior, tree)?)
}

fn check_setup(inputs: &ModelInputs, prior: &PriorSpec, tree: Option<&PartitionTree>) -> Result<()> {
    prior.validate()?;
    match (&inputs.design, prior.kind.is_tree_space()) {
        (Design::Tree(d), true) => {
            let tree = tree.ok_or_else(|| Error::arg("a tree-space prior needs the partition tree"))?;
            if tree.height != d.height {
                return Err(Error::Shape("tree height differs from the design".into()));
            }
        }
        (Design::Identity(_), false) => {}
        (Design::Tree(_), false) => {
            return Err(Error::arg("leaf-space priors need an identity design"));
        }
        (Design::Identity(_), true) => {
            return Err(Error::arg("the fused GDP prior needs a tree design"));
        }
    }
    Ok(())
}

/// Random start: coefficients `~ N(0, init_scale²)`, everything else at
/// [`FitState::initial`].
pub fn initial_state(inputs: &ModelInputs, config: &EmConfig) -> FitState {
    let mut state = FitState::initial(inputs);
    let mut rng = stream_rng(config.seed, Stream::Initialization, config.init_index);
    let normal = Normal::new(0.0, config.init_scale).expect("validated scale");
    for g in state.gamma.iter_mut() {
        *g = normal.sample(&mut rng);
    }
    state
}

pub fn fit(inputs: &ModelInputs, prior: &PriorSpec, tree: Option<&PartitionTree>, config: &EmConfig) -> Result<FitResult> {
    config.validate()?;
    check_setup(inputs, prior, tree)?;
    fit_from(inputs, prior, tree, config, initial_state(inputs, config))
}

/// Inverse of the curvature, applied blockwise: Cholesky solve on the dense
/// block, division on the log-variance diagonal.
struct Preconditioner {
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    diag: Vec<f64>,
    dense_dim: usize,
    k_diag: Vec<f64>,
}

impl Preconditioner {
    fn new(c: model::Curvature) -> Self {
        let dim = c.dense.nrows();
        let diag: Vec<f64> = (0..dim).map(|i| c.dense[(i, i)].max(1e-12)).collect();
        let scale = diag.iter().cloned().fold(0.0, f64::max).max(1.0);
        let mut chol = None;
        for ridge in [0.0, 1e-12, 1e-8, 1e-4] {
            let mut m: DMatrix<f64> = c.dense.clone();
            for i in 0..dim {
                m[(i, i)] += ridge * scale;
            }
            if let Some(ch) = m.cholesky() {
                chol = Some(ch);
                break;
            }
        }
        if chol.is_none() {
            log::debug!("curvature not positive definite; using its diagonal");
        }
        Preconditioner {
            chol,
            diag,
            dense_dim: dim,
            k_diag: c.k_diag.iter().map(|v| v.max(1e-12)).collect(),
        }
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let (head, tail) = v.split_at(self.dense_dim);
        let mut out: Vec<f64> = match &self.chol {
            Some(ch) => ch.solve(&nalgebra::DVector::from_column_slice(head)).iter().cloned().collect(),
            None => head.iter().zip(&self.diag).map(|(a, d)| a / d).collect(),
        };
        out.extend(tail.iter().zip(&self.k_diag).map(|(a, d)| a / d));
        out
    }
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// EM from a given starting state.
pub fn fit_from(inputs: &ModelInputs, prior: &PriorSpec, tree: Option<&PartitionTree>, config: &EmConfig, init: FitState) -> Result<FitResult> {
    config.validate()?;
    check_setup(inputs, prior, tree)?;
    init.check(inputs)?;
    let layout = Layout::of(inputs);
    let mut state = init;
    let mut beta = inputs.design.apply(&state.gamma);
    let initial_objective = em_objective(inputs, &state, prior, tree)?;
    let mut current = initial_objective;
    let mut trace: Vec<TraceEntry> = Vec::new();
    let mut inner_used = 0usize;
    let mut converged = false;
    let fail = |iterations: usize, message: String, trace: &[TraceEntry]| Error::Optimization {
        iterations,
        message,
        trace: trace.iter().map(|e| (e.objective, e.delta_beta)).collect(),
    };

    for it in 1..=config.max_em_iters {
        let budget = config.inner_iters_per_em.min(config.max_inner_iters - inner_used);
        if budget == 0 {
            log::debug!("quasi-Newton budget exhausted after {} EM iterations", it - 1);
            break;
        }
        let weights = estep_weights(&state.gamma, prior, tree)?;
        let lambda = assemble_precision(&weights)?;
        let pre = Preconditioner::new(curvature(inputs, &state, &lambda).map_err(|e| fail(it, e.to_string(), &trace))?);
        let h0 = |v: &[f64]| pre.apply(v);
        let mut scratch = state.clone();
        let opts = LbfgsOptions {
            memory: config.lbfgs_memory,
            max_iters: budget,
            grad_tol: 1e-8,
        };
        let outcome = lbfgs_maximize_with(
            |v: &[f64]| {
                scratch.unpack(layout, v);
                let (val, g) = model::objective(inputs, &scratch, &lambda, true)?;
                Ok((val, g.expect("gradient requested")))
            },
            state.pack(),
            opts,
            Some(&h0),
        )
        .map_err(|e| fail(it, e.to_string(), &trace))?;
        inner_used += outcome.iterations.max(1);

        let mut next = state.clone();
        next.unpack(layout, &outcome.x);
        next.omega = omega_fixed_point(&next);
        let value = em_objective(inputs, &next, prior, tree).map_err(|e| fail(it, e.to_string(), &trace))?;
        if !value.is_finite() {
            return Err(fail(it, "non-finite objective".into(), &trace));
        }
        if value < current {
            // rounding-level decrease at a fixed point: keep the previous state
            log::debug!("EM step rejected at iteration {it}: {value} < {current}");
            trace.push(TraceEntry {
                objective: current,
                delta_beta: 0.0,
            });
            converged = true;
            break;
        }
        let next_beta = inputs.design.apply(&next.gamma);
        let delta = norm_diff(&next_beta, &beta);
        state = next;
        beta = next_beta;
        current = value;
        trace.push(TraceEntry {
            objective: value,
            delta_beta: delta,
        });
        if delta < config.conv_tol {
            converged = true;
            break;
        }
    }
    Ok(FitResult {
        iterations: trace.len(),
        state,
        beta_hat: beta,
        initial_objective,
        trace,
        converged,
        inner_iterations: inner_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelInputs {
        ModelInputs::new(vec![1.0, 3.0, 0.0, 2.0, 5.0, 1.0], vec![0.0, 1.0, 2.0], vec![1.0; 3], Design::Identity(2)).unwrap()
    }

    #[test]
    fn omega_examples() {
        let inp = tiny();
        let mut s = FitState::initial(&inp);
        let v: f64 = 0.3;
        s.k_a = v.ln();
        s.k_b.iter_mut().for_each(|k| *k = v.ln());
        s.k_c.iter_mut().for_each(|k| *k = v.ln());
        let w = omega_fixed_point(&s);
        for x in w {
            assert!((x - v).abs() < 1e-15);
        }
        s.zeta_a = 1.0;
        s.k_a = f64::NEG_INFINITY;
        assert_eq!(omega_fixed_point(&s)[0], 1.0);
    }

    #[test]
    fn omega_zeroes_the_variance_gradient() {
        let inp = tiny();
        let mut s = FitState::initial(&inp);
        s.zeta_a = 0.4;
        s.zeta_b = vec![0.2, -0.7];
        s.zeta_c = vec![1.1];
        s.k_b = vec![-1.0, 0.5];
        s.omega = omega_fixed_point(&s);
        // D_ω of the bound: −1/(2ω)·count + S/(2ω²)
        let sb: f64 = s.zeta_b.iter().zip(&s.k_b).map(|(z, k)| z * z + k.exp()).sum();
        let d = -(2.0) / (2.0 * s.omega[1]) + sb / (2.0 * s.omega[1] * s.omega[1]);
        assert!(d.abs() < 1e-10);
        let da = -0.5 / s.omega[0] + (s.zeta_a * s.zeta_a + s.k_a.exp()) / (2.0 * s.omega[0] * s.omega[0]);
        assert!(da.abs() < 1e-10);
    }

    #[test]
    fn rejects_mismatched_prior() {
        let inp = tiny();
        let p = PriorSpec::named("fgdp2").unwrap();
        assert!(fit(&inp, &p, None, &EmConfig::default()).is_err());
    }

    #[test]
    fn trace_is_monotone_and_deterministic() {
        let inp = tiny();
        let p = PriorSpec::named("gdp").unwrap();
        let cfg = EmConfig {
            seed: 3,
            ..EmConfig::default()
        };
        let a = fit(&inp, &p, None, &cfg).unwrap();
        let b = fit(&inp, &p, None, &cfg).unwrap();
        assert_eq!(a, b);
        let mut prev = a.initial_objective;
        for e in &a.trace {
            assert!(e.objective >= prev - 1e-8);
            prev = e.objective;
        }
        assert_eq!(a.beta_hat, inp.design.apply(&a.state.gamma));
    }
}
