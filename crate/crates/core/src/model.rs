//! Poisson inverse-regression mixed model.
//!
//! Counts follow `x_ij ~ Poisson(t_i·exp(η_ij))` with
//! `η_ij = a + b_i + c_j + y_i·β_j` and `β = D·γ`. The random effects
//! `a`, `b_i` (i ≥ 2) and `c_j` (j ≥ 2) are Gaussian with variances
//! `ω = (ω_a, ω_b, ω_c)`; `b_1 = c_1 = 0` (corner constraint). Their
//! posterior is approximated by independent Gaussians with means `ζ` and
//! variances `κ = exp(k)`, which yields the lower bound `ℓ̲` maximized here.
//!
//! All double sums run row-parallel over replicates with an ordered pairwise
//! reduction, so results do not depend on the thread count.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::priors::Precision;
use crate::quad;
use crate::tree::{CountMatrices, DesignMatrix};
use crate::{Error, Result};

/// Exponents above this continue linearly instead of overflowing.
pub const ETA_CLAMP: f64 = 30.0;

const PAR_CELLS: usize = 1 << 15;

/// Leaf coefficients as a linear image of the fitted coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    /// Leaf-space fit: `β = γ`.
    Identity(usize),
    /// Tree-space fit: `β = D·γ`.
    Tree(DesignMatrix),
}

impl Design {
    pub fn leaves(&self) -> usize {
        match self {
            Design::Identity(m) => *m,
            Design::Tree(d) => d.rows(),
        }
    }

    pub fn coefs(&self) -> usize {
        match self {
            Design::Identity(m) => *m,
            Design::Tree(d) => d.cols(),
        }
    }

    pub fn apply(&self, gamma: &[f64]) -> Vec<f64> {
        match self {
            Design::Identity(_) => gamma.to_vec(),
            Design::Tree(d) => d.apply(gamma),
        }
    }

    pub fn transpose_apply(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Design::Identity(_) => v.to_vec(),
            Design::Tree(d) => d.transpose_apply(v),
        }
    }

    /// Coefficients contributing to leaf `j`.
    pub fn support(&self, j: usize) -> Vec<usize> {
        match self {
            Design::Identity(_) => vec![j],
            Design::Tree(d) => d.row_support(j),
        }
    }
}

/// Data of one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInputs {
    pub n: usize,
    pub m: usize,
    /// `n x m` counts, row-major.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub t: Vec<f64>,
    pub design: Design,
}

impl ModelInputs {
    pub fn new(x: Vec<f64>, y: Vec<f64>, t: Vec<f64>, design: Design) -> Result<Self> {
        let n = y.len();
        let m = design.leaves();
        if n == 0 || m == 0 {
            return Err(Error::Shape("need at least one replicate and one leaf".into()));
        }
        if x.len() != n * m || t.len() != n {
            return Err(Error::Shape(format!(
                "counts {} / exposures {} do not match n = {n}, m = {m}",
                x.len(),
                t.len()
            )));
        }
        if x.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::arg("counts must be finite and non-negative"));
        }
        if t.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::arg("exposures must be positive"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("responses must be finite"));
        }
        Ok(ModelInputs { n, m, x, y, t, design })
    }

    pub fn from_counts(counts: &CountMatrices, y: Vec<f64>, t: Vec<f64>, design: Design) -> Result<Self> {
        if counts.m != design.leaves() {
            return Err(Error::Shape("design and count matrix disagree on leaves".into()));
        }
        Self::new(counts.x_f64(), y, t, design)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.m..(i + 1) * self.m]
    }

    /// `Σ x_ij ln t_i − ln x_ij!`: the parameter-free part of the likelihood.
    pub fn data_constant(&self) -> f64 {
        let rows: Vec<f64> = (0..self.n)
            .map(|i| {
                let lt = self.t[i].ln();
                let terms: Vec<f64> = self
                    .row(i)
                    .iter()
                    .map(|&x| x * lt - libm::lgamma(x + 1.0))
                    .collect();
                pairwise_sum(&terms)
            })
            .collect();
        pairwise_sum(&rows)
    }
}

/// Model parameters and variational parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitState {
    /// Tree coefficients (leaf coefficients in a leaf-space fit).
    pub gamma: Vec<f64>,
    pub zeta_a: f64,
    /// `ζ^b_2 .. ζ^b_n`.
    pub zeta_b: Vec<f64>,
    /// `ζ^c_2 .. ζ^c_m`.
    pub zeta_c: Vec<f64>,
    pub k_a: f64,
    pub k_b: Vec<f64>,
    pub k_c: Vec<f64>,
    pub omega: [f64; 3],
}

/// Offsets of the blocks in the packed parameter vector
/// `(γ, ζ^a, ζ^b, ζ^c, k^a, k^b, k^c)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub coefs: usize,
    pub n: usize,
    pub m: usize,
}

impl Layout {
    pub fn of(inputs: &ModelInputs) -> Self {
        Layout {
            coefs: inputs.design.coefs(),
            n: inputs.n,
            m: inputs.m,
        }
    }

    pub fn zeta_a(&self) -> usize {
        self.coefs
    }
    pub fn zeta_b(&self) -> usize {
        self.coefs + 1
    }
    pub fn zeta_c(&self) -> usize {
        self.zeta_b() + self.n - 1
    }
    pub fn k_a(&self) -> usize {
        self.zeta_c() + self.m - 1
    }
    pub fn k_b(&self) -> usize {
        self.k_a() + 1
    }
    pub fn k_c(&self) -> usize {
        self.k_b() + self.n - 1
    }
    pub fn len(&self) -> usize {
        self.k_c() + self.m - 1
    }
    pub fn is_empty(&self) -> bool {
        false
    }
}

impl FitState {
    /// Zero coefficients and means, `κ = 0.01`, `ω = 1`.
    pub fn initial(inputs: &ModelInputs) -> Self {
        let k0 = 0.01f64.ln();
        FitState {
            gamma: vec![0.0; inputs.design.coefs()],
            zeta_a: 0.0,
            zeta_b: vec![0.0; inputs.n - 1],
            zeta_c: vec![0.0; inputs.m - 1],
            k_a: k0,
            k_b: vec![k0; inputs.n - 1],
            k_c: vec![k0; inputs.m - 1],
            omega: [1.0; 3],
        }
    }

    pub fn check(&self, inputs: &ModelInputs) -> Result<()> {
        let (n, m) = (inputs.n, inputs.m);
        if self.gamma.len() != inputs.design.coefs()
            || self.zeta_b.len() != n - 1
            || self.k_b.len() != n - 1
            || self.zeta_c.len() != m - 1
            || self.k_c.len() != m - 1
        {
            return Err(Error::Shape("state does not match the model dimensions".into()));
        }
        if self.omega.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::arg("omega must be positive"));
        }
        Ok(())
    }

    pub fn pack(&self) -> Vec<f64> {
        let mut v = self.gamma.clone();
        v.push(self.zeta_a);
        v.extend_from_slice(&self.zeta_b);
        v.extend_from_slice(&self.zeta_c);
        v.push(self.k_a);
        v.extend_from_slice(&self.k_b);
        v.extend_from_slice(&self.k_c);
        v
    }

    pub fn unpack(&mut self, layout: Layout, v: &[f64]) {
        assert_eq!(v.len(), layout.len());
        self.gamma.copy_from_slice(&v[..layout.coefs]);
        self.zeta_a = v[layout.zeta_a()];
        self.zeta_b.copy_from_slice(&v[layout.zeta_b()..layout.zeta_c()]);
        self.zeta_c.copy_from_slice(&v[layout.zeta_c()..layout.k_a()]);
        self.k_a = v[layout.k_a()];
        self.k_b.copy_from_slice(&v[layout.k_b()..layout.k_c()]);
        self.k_c.copy_from_slice(&v[layout.k_c()..layout.len()]);
    }

    fn zb(&self, i: usize) -> f64 {
        if i == 0 {
            0.0
        } else {
            self.zeta_b[i - 1]
        }
    }
    fn zc(&self, j: usize) -> f64 {
        if j == 0 {
            0.0
        } else {
            self.zeta_c[j - 1]
        }
    }
    fn kb(&self, i: usize) -> f64 {
        if i == 0 {
            0.0
        } else {
            self.k_b[i - 1].exp()
        }
    }
    fn kc(&self, j: usize) -> f64 {
        if j == 0 {
            0.0
        } else {
            self.k_c[j - 1].exp()
        }
    }
}

/// Summation by recursive halving; fixed association order.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 16 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Column sums of a row-major `rows x cols` block by pairwise halving over rows.
fn column_sums(mat: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    if rows <= 8 {
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(&mat[r * cols..(r + 1) * cols]) {
                *o += v;
            }
        }
        return out;
    }
    let mid = rows / 2;
    let (top, bottom) = mat.split_at(mid * cols);
    let mut a = column_sums(top, mid, cols);
    let b = column_sums(bottom, rows - mid, cols);
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
    a
}

/// `η` of one cell at the variational means.
pub fn linear_predictor(inputs: &ModelInputs, state: &FitState, i: usize, j: usize) -> f64 {
    let beta_j: f64 = inputs
        .design
        .support(j)
        .into_iter()
        .map(|l| state.gamma[l])
        .sum();
    state.zeta_a + state.zb(i) + state.zc(j) + inputs.y[i] * beta_j
}

/// `exp` continued linearly past the clamp: (value, derivative).
#[inline]
fn soft_exp(e: f64) -> (f64, f64) {
    if e <= ETA_CLAMP {
        let v = e.exp();
        (v, v)
    } else {
        let c = ETA_CLAMP.exp();
        (c * (1.0 + e - ETA_CLAMP), c)
    }
}

/// Per-cell expected counts under the variational Gaussians.
struct Cells {
    /// Per-row `Σ_j x·μ − t·f(e)`.
    row_value: Vec<f64>,
    /// `x̃_ij = t_i·f'(e_ij)`.
    xd: Vec<f64>,
}

fn cells(inputs: &ModelInputs, state: &FitState, beta: &[f64]) -> Result<Cells> {
    let (n, m) = (inputs.n, inputs.m);
    let ka = state.k_a.exp();
    let mut xd = vec![0.0; n * m];
    let row = |i: usize, out: &mut [f64]| -> Result<(f64, usize)> {
        let base_mu = state.zeta_a + state.zb(i);
        let base_k = ka + state.kb(i);
        let yi = inputs.y[i];
        let ti = inputs.t[i];
        let xi = inputs.row(i);
        let mut terms = Vec::with_capacity(m);
        let mut clamped = 0;
        for j in 0..m {
            let mu = base_mu + state.zc(j) + yi * beta[j];
            let e = mu + 0.5 * (base_k + state.kc(j));
            if !e.is_finite() {
                return Err(Error::NonFinite { i, j });
            }
            if e > ETA_CLAMP {
                clamped += 1;
            }
            let (f, fp) = soft_exp(e);
            out[j] = ti * fp;
            terms.push(xi[j] * mu - ti * f);
        }
        Ok((pairwise_sum(&terms), clamped))
    };
    let results: Vec<Result<(f64, usize)>> = if n * m >= PAR_CELLS {
        xd.par_chunks_mut(m).enumerate().map(|(i, out)| row(i, out)).collect()
    } else {
        xd.chunks_mut(m).enumerate().map(|(i, out)| row(i, out)).collect()
    };
    let mut row_value = Vec::with_capacity(n);
    let mut clamped = 0;
    for r in results {
        let (v, c) = r?;
        row_value.push(v);
        clamped += c;
    }
    if clamped > 0 {
        log::warn!("{clamped} cells exceeded the exponent clamp of {ETA_CLAMP}");
    }
    Ok(Cells { row_value, xd })
}

/// Terms of the bound that do not involve the counts.
fn prior_entropy_terms(inputs: &ModelInputs, s: &FitState) -> f64 {
    let (n, m) = (inputs.n as f64, inputs.m as f64);
    let [wa, wb, wc] = s.omega;
    let sq_b: Vec<f64> = s.zeta_b.iter().zip(&s.k_b).map(|(z, k)| z * z + k.exp()).collect();
    let sq_c: Vec<f64> = s.zeta_c.iter().zip(&s.k_c).map(|(z, k)| z * z + k.exp()).collect();
    -(s.zeta_a * s.zeta_a + s.k_a.exp()) / (2.0 * wa) - pairwise_sum(&sq_b) / (2.0 * wb)
        - pairwise_sum(&sq_c) / (2.0 * wc)
        - 0.5 * wa.ln()
        - 0.5 * (n - 1.0) * wb.ln()
        - 0.5 * (m - 1.0) * wc.ln()
        + 0.5 * (s.k_a + pairwise_sum(&s.k_b) + pairwise_sum(&s.k_c))
        + 0.5 * (n + m - 1.0)
}

/// The variational lower bound on `ln p(X | y, γ, ω)`, including the
/// parameter-free terms `Σ x ln t − ln x!`.
pub fn gva_lower_bound(inputs: &ModelInputs, state: &FitState) -> Result<f64> {
    Ok(bound_without_constant(inputs, state)? + inputs.data_constant())
}

fn bound_without_constant(inputs: &ModelInputs, state: &FitState) -> Result<f64> {
    state.check(inputs)?;
    let beta = inputs.design.apply(&state.gamma);
    let c = cells(inputs, state, &beta)?;
    Ok(pairwise_sum(&c.row_value) + prior_entropy_terms(inputs, state))
}

/// `ln p(X | y, a, b, c, γ)` at exact random-effect values (`b`, `c` of
/// full length; the corner entries are used as given).
pub fn complete_log_likelihood(inputs: &ModelInputs, a: f64, b: &[f64], c: &[f64], gamma: &[f64]) -> f64 {
    let beta = inputs.design.apply(gamma);
    let rows: Vec<f64> = (0..inputs.n)
        .map(|i| {
            let lt = inputs.t[i].ln();
            let terms: Vec<f64> = (0..inputs.m)
                .map(|j| {
                    let eta = a + b[i] + c[j] + inputs.y[i] * beta[j];
                    let x = inputs.x[i * inputs.m + j];
                    x * (lt + eta) - inputs.t[i] * eta.exp() - libm::lgamma(x + 1.0)
                })
                .collect();
            pairwise_sum(&terms)
        })
        .collect();
    pairwise_sum(&rows)
}

/// The M-step objective `Q = ℓ̲ − γᵀΛ̃γ/2` (without the data constant) and
/// its gradient in packed layout.
pub fn objective(inputs: &ModelInputs, state: &FitState, lambda: &Precision, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    state.check(inputs)?;
    if lambda.dim() != state.gamma.len() {
        return Err(Error::Shape("precision and coefficient dimensions differ".into()));
    }
    let (n, m) = (inputs.n, inputs.m);
    let beta = inputs.design.apply(&state.gamma);
    let c = cells(inputs, state, &beta)?;
    let lg = lambda.apply(&state.gamma);
    let value = pairwise_sum(&c.row_value) + prior_entropy_terms(inputs, state)
        - 0.5 * pairwise_sum(&lg.iter().zip(&state.gamma).map(|(a, b)| a * b).collect::<Vec<_>>());
    if !value.is_finite() {
        return Err(Error::NonFinite { i: 0, j: 0 });
    }
    if !want_grad {
        return Ok((value, None));
    }
    let layout = Layout::of(inputs);
    let mut g = vec![0.0; layout.len()];

    let eps: Vec<f64> = inputs.x.iter().zip(&c.xd).map(|(x, e)| x - e).collect();
    let epsy: Vec<f64> = eps
        .chunks(m)
        .zip(&inputs.y)
        .flat_map(|(row, &y)| row.iter().map(move |e| e * y))
        .collect();
    let col_eps = column_sums(&eps, n, m);
    let col_epsy = column_sums(&epsy, n, m);
    let col_xd = column_sums(&c.xd, n, m);
    let row_eps: Vec<f64> = eps.chunks(m).map(pairwise_sum).collect();
    let row_xd: Vec<f64> = c.xd.chunks(m).map(pairwise_sum).collect();
    let tot_eps = pairwise_sum(&col_eps);
    let tot_xd = pairwise_sum(&col_xd);

    let dg = inputs.design.transpose_apply(&col_epsy);
    for (l, (d, p)) in dg.iter().zip(&lg).enumerate() {
        g[l] = d - p;
    }
    let [wa, wb, wc] = state.omega;
    g[layout.zeta_a()] = -state.zeta_a / wa + tot_eps;
    for i in 1..n {
        g[layout.zeta_b() + i - 1] = -state.zeta_b[i - 1] / wb + row_eps[i];
    }
    for j in 1..m {
        g[layout.zeta_c() + j - 1] = -state.zeta_c[j - 1] / wc + col_eps[j];
    }
    let ka = state.k_a.exp();
    g[layout.k_a()] = -ka / (2.0 * wa) + 0.5 - 0.5 * tot_xd * ka;
    for i in 1..n {
        let k = state.k_b[i - 1].exp();
        g[layout.k_b() + i - 1] = -k / (2.0 * wb) + 0.5 - 0.5 * row_xd[i] * k;
    }
    for j in 1..m {
        let k = state.k_c[j - 1].exp();
        g[layout.k_c() + j - 1] = -k / (2.0 * wc) + 0.5 - 0.5 * col_xd[j] * k;
    }
    Ok((value, Some(g)))
}

/// `D_γ Q`.
pub fn grad_gamma(inputs: &ModelInputs, state: &FitState, lambda: &Precision) -> Result<Vec<f64>> {
    let (_, g) = objective(inputs, state, lambda, true)?;
    let mut g = g.expect("gradient requested");
    g.truncate(inputs.design.coefs());
    Ok(g)
}

/// Gradient blocks for the random-effect parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectGradient {
    pub a: f64,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

fn effect_block(inputs: &ModelInputs, state: &FitState, start: usize) -> Result<EffectGradient> {
    let lambda = Precision::zeros(inputs.design.coefs());
    let (_, g) = objective(inputs, state, &lambda, true)?;
    let g = g.expect("gradient requested");
    let (n, m) = (inputs.n, inputs.m);
    Ok(EffectGradient {
        a: g[start],
        b: g[start + 1..start + n].to_vec(),
        c: g[start + n..start + n + m - 1].to_vec(),
    })
}

/// `D_ζ Q` for `(ζ^a, ζ^b_{2..n}, ζ^c_{2..m})`.
pub fn grad_zeta(inputs: &ModelInputs, state: &FitState) -> Result<EffectGradient> {
    effect_block(inputs, state, Layout::of(inputs).zeta_a())
}

/// `D_k Q` for the log-variances.
pub fn grad_k(inputs: &ModelInputs, state: &FitState) -> Result<EffectGradient> {
    effect_block(inputs, state, Layout::of(inputs).k_a())
}

/// Curvature of `−Q` used to precondition the quasi-Newton updates: the
/// exact Hessian block over `(γ, ζ)` (with the exponent clamp ignored) and a
/// diagonal for the log-variances.
#[derive(Debug, Clone)]
pub struct Curvature {
    pub dense: DMatrix<f64>,
    pub k_diag: Vec<f64>,
}

pub fn curvature(inputs: &ModelInputs, state: &FitState, lambda: &Precision) -> Result<Curvature> {
    let layout = Layout::of(inputs);
    let (n, m, p) = (inputs.n, inputs.m, layout.coefs);
    let beta = inputs.design.apply(&state.gamma);
    let xd = cells(inputs, state, &beta)?.xd;
    let dim = layout.k_a();
    let mut h = DMatrix::<f64>::zeros(dim, dim);
    let za = layout.zeta_a();
    let zb = |i: usize| layout.zeta_b() + i - 1;
    let zc = |j: usize| layout.zeta_c() + j - 1;
    let supports: Vec<Vec<usize>> = (0..m).map(|j| inputs.design.support(j)).collect();

    let mut row_xd = vec![0.0; n];
    let mut col_xd = vec![0.0; m];
    let mut col_xdy = vec![0.0; m];
    let mut col_xdyy = vec![0.0; m];
    for i in 0..n {
        let y = inputs.y[i];
        for j in 0..m {
            let v = xd[i * m + j];
            row_xd[i] += v;
            col_xd[j] += v;
            col_xdy[j] += v * y;
            col_xdyy[j] += v * y * y;
            if i > 0 {
                if j > 0 {
                    h[(zb(i), zc(j))] += v;
                }
                for &l in &supports[j] {
                    h[(zb(i), l)] += v * y;
                }
            }
        }
    }
    let total: f64 = row_xd.iter().sum();
    h[(za, za)] = total;
    for i in 1..n {
        h[(za, zb(i))] = row_xd[i];
        h[(zb(i), zb(i))] = row_xd[i];
    }
    for j in 0..m {
        if j > 0 {
            h[(za, zc(j))] = col_xd[j];
            h[(zc(j), zc(j))] = col_xd[j];
        }
        for (a, &l) in supports[j].iter().enumerate() {
            h[(za, l)] += col_xdy[j];
            if j > 0 {
                h[(zc(j), l)] += col_xdy[j];
            }
            for &l2 in &supports[j][a..] {
                h[(l, l2)] += col_xdyy[j];
            }
        }
    }
    // mirror the upper-left blocks filled above into a symmetric matrix
    for r in 0..dim {
        for c in 0..r {
            let v = h[(r, c)] + h[(c, r)];
            h[(r, c)] = v;
            h[(c, r)] = v;
        }
    }
    for l in 0..p {
        h[(l, l)] += lambda.diag[l];
    }
    for &(u, w, a) in &lambda.off {
        h[(u, w)] += a;
        h[(w, u)] += a;
    }
    let [wa, wb, wc] = state.omega;
    h[(za, za)] += 1.0 / wa;
    for i in 1..n {
        h[(zb(i), zb(i))] += 1.0 / wb;
    }
    for j in 1..m {
        h[(zc(j), zc(j))] += 1.0 / wc;
    }

    let kdiag = |k: f64, w: f64, s: f64| {
        let kap = k.exp();
        kap / (2.0 * w) + 0.5 * kap * s + 0.25 * kap * kap * s
    };
    let mut k_diag = vec![kdiag(state.k_a, wa, total)];
    k_diag.extend((1..n).map(|i| kdiag(state.k_b[i - 1], wb, row_xd[i])));
    k_diag.extend((1..m).map(|j| kdiag(state.k_c[j - 1], wc, col_xd[j])));
    Ok(Curvature { dense: h, k_diag })
}

/// The reduction `βᵀx`.
pub fn sdr_score(x: &[f64], beta: &[f64]) -> f64 {
    assert_eq!(x.len(), beta.len(), "score needs matching lengths");
    x.iter().zip(beta).map(|(a, b)| a * b).sum()
}

/// `p(y | x)` on a grid, for the inverse-regression model with leaf
/// intercepts `α_j`: `∝ prior(y)·exp(y·βᵀx)·Π_j exp(−exp(α_j + y·β_j))`.
/// The data enter only through `βᵀx`.
pub fn posterior_response_oracle(x: &[f64], beta: &[f64], intercepts: &[f64], y_grid: &[f64], y_prior: &[f64]) -> Result<Vec<f64>> {
    if beta.len() != x.len() || intercepts.len() != x.len() || y_grid.len() != y_prior.len() {
        return Err(Error::Shape("oracle arguments have mismatched lengths".into()));
    }
    let score = sdr_score(x, beta);
    let logp: Vec<f64> = y_grid
        .iter()
        .zip(y_prior)
        .map(|(&y, &p)| {
            let rate: f64 = intercepts.iter().zip(beta).map(|(a, b)| (a + y * b).exp()).sum();
            p.ln() + y * score - rate
        })
        .collect();
    let mx = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logp.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / z).collect())
}

/// `ln p(X | y, γ, ω)` by Gauss–Hermite quadrature over the random effects,
/// centred and scaled at the Laplace approximation. For tiny models only
/// (at most five random effects); the node count grows until two
/// consecutive estimates agree to `1e−10`.
pub fn log_marginal_quadrature(inputs: &ModelInputs, gamma: &[f64], omega: [f64; 3]) -> Result<f64> {
    let (n, m) = (inputs.n, inputs.m);
    let d = 1 + (n - 1) + (m - 1);
    if d > 5 {
        return Err(Error::arg("quadrature oracle supports at most five random effects"));
    }
    let var: Vec<f64> = std::iter::once(omega[0])
        .chain(std::iter::repeat_n(omega[1], n - 1))
        .chain(std::iter::repeat_n(omega[2], m - 1))
        .collect();
    let split = |u: &[f64]| {
        let mut b = vec![0.0; n];
        b[1..].copy_from_slice(&u[1..n]);
        let mut c = vec![0.0; m];
        c[1..].copy_from_slice(&u[n..]);
        (u[0], b, c)
    };
    let log_joint = |u: &[f64]| {
        let (a, b, c) = split(u);
        let prior: f64 = u
            .iter()
            .zip(&var)
            .map(|(x, v)| -0.5 * (2.0 * std::f64::consts::PI * v).ln() - x * x / (2.0 * v))
            .sum();
        complete_log_likelihood(inputs, a, &b, &c, gamma) + prior
    };
    let beta = inputs.design.apply(gamma);
    // gradient and Hessian of the log joint
    let derivs = |u: &[f64]| {
        let (a, b, c) = split(u);
        let mut g = DVector::<f64>::zeros(d);
        let mut h = DMatrix::<f64>::zeros(d, d);
        for i in 0..n {
            for j in 0..m {
                let mu = inputs.t[i] * (a + b[i] + c[j] + inputs.y[i] * beta[j]).exp();
                let r = inputs.x[i * m + j] - mu;
                let mut idx = vec![0];
                if i > 0 {
                    idx.push(i);
                }
                if j > 0 {
                    idx.push(n - 1 + j);
                }
                for &p in &idx {
                    g[p] += r;
                    for &q in &idx {
                        h[(p, q)] -= mu;
                    }
                }
            }
        }
        for k in 0..d {
            g[k] -= u[k] / var[k];
            h[(k, k)] -= 1.0 / var[k];
        }
        (g, h)
    };
    // damped Newton to the mode
    let mut u = vec![0.0; d];
    let mut f = log_joint(&u);
    for _ in 0..200 {
        let (g, h) = derivs(&u);
        let neg = -h;
        let step = neg
            .cholesky()
            .ok_or_else(|| Error::Quadrature("Hessian not negative definite".into()))?
            .solve(&g);
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..60 {
            let cand: Vec<f64> = u.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            let fc = log_joint(&cand);
            if fc >= f {
                improved = fc > f;
                u = cand;
                f = fc;
                break;
            }
            t *= 0.5;
        }
        if !improved || g.norm() < 1e-12 {
            break;
        }
    }
    let (_, h) = derivs(&u);
    let chol = (-h)
        .cholesky()
        .ok_or_else(|| Error::Quadrature("Hessian not negative definite at the mode".into()))?;
    let l = chol.l();
    let linv_t = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Quadrature("singular Laplace factor".into()))?
        .transpose();
    let log_det_l: f64 = (0..d).map(|k| l[(k, k)].ln()).sum();
    let sqrt2 = std::f64::consts::SQRT_2;

    let estimate = |nodes: usize| -> f64 {
        let rule = quad::hermite_rule(nodes);
        let mut idx = vec![0usize; d];
        let mut terms = Vec::with_capacity(nodes.pow(d as u32));
        loop {
            let mut w = 1.0;
            let mut z2 = 0.0;
            let z: Vec<f64> = idx
                .iter()
                .map(|&k| {
                    let (x, wt) = rule[k];
                    w *= wt;
                    z2 += x * x;
                    x * sqrt2
                })
                .collect();
            let zv = DVector::from_vec(z);
            let off = &linv_t * zv;
            let point: Vec<f64> = u.iter().zip(off.iter()).map(|(a, o)| a + o).collect();
            terms.push(w * (log_joint(&point) - f + z2).exp());
            let mut k = 0;
            loop {
                if k == d {
                    let s = pairwise_sum(&terms);
                    return f + (d as f64) * sqrt2.ln() - log_det_l + s.ln();
                }
                idx[k] += 1;
                if idx[k] < nodes {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
        }
    };
    let mut prev = estimate(12);
    for nodes in [16, 24, 32, 40] {
        let cur = estimate(nodes);
        if (cur - prev).abs() < 1e-10 {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(Error::Quadrature(format!("Gauss–Hermite estimates still moving at 40 nodes ({prev})")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::PartitionTree;

    fn single(x: f64) -> ModelInputs {
        ModelInputs::new(vec![x], vec![0.0], vec![1.0], Design::Identity(1)).unwrap()
    }

    #[test]
    fn complete_likelihood_examples() {
        assert_eq!(complete_log_likelihood(&single(0.0), 0.0, &[0.0], &[0.0], &[0.0]), -1.0);
        let v = complete_log_likelihood(&single(2.0), 0.0, &[0.0], &[0.0], &[0.0]);
        assert!((v - (-1.0 - 2f64.ln())).abs() < 1e-12);
        // exposure offset identity
        let mut inp = single(3.0);
        let base = complete_log_likelihood(&inp, 0.2, &[0.0], &[0.0], &[0.0]);
        inp.t[0] = 5.0;
        let moved = complete_log_likelihood(&inp, 0.2 - 5f64.ln(), &[0.0], &[0.0], &[0.0]);
        assert!((base - moved).abs() < 1e-12);
    }

    #[test]
    fn bound_hand_evaluation() {
        let inp = single(0.0);
        let mut s = FitState::initial(&inp);
        s.k_a = 0.0;
        let v = gva_lower_bound(&inp, &s).unwrap();
        assert!((v + 0.5f64.exp()).abs() < 1e-14);
    }

    #[test]
    fn predictor_examples() {
        let tree = PartitionTree::canonical(3).unwrap();
        let inp = ModelInputs::new(vec![0.0; 16], vec![2.0, 1.0], vec![1.0; 2], Design::Tree(tree.design_matrix())).unwrap();
        let mut s = FitState::initial(&inp);
        assert_eq!(linear_predictor(&inp, &s, 0, 0), 0.0);
        s.zeta_a = 0.7;
        assert_eq!(linear_predictor(&inp, &s, 0, 0), 0.7);
        s.gamma[0] = 1.0;
        s.zeta_c[2] = 0.1;
        for j in 0..8 {
            let expect = 0.7 + if j == 3 { 0.1 } else { 0.0 } + 2.0;
            assert!((linear_predictor(&inp, &s, 0, j) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let n = 3;
        let m = 2;
        let y = vec![0.5, 1.0, 2.0];
        let t = vec![1.0, 2.0, 0.5];
        let mut inp = ModelInputs::new(vec![0.0; 6], y, t, Design::Identity(m)).unwrap();
        let mut s = FitState::initial(&inp);
        s.gamma = vec![0.3, -0.2];
        let beta = inp.design.apply(&s.gamma);
        inp.x = cells(&inp, &s, &beta).unwrap().xd;
        let g = grad_gamma(&inp, &s, &Precision::zeros(m)).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
        let z = grad_zeta(&inp, &s).unwrap();
        assert!(z.a.abs() < 1e-12 && z.b.iter().chain(&z.c).all(|v| v.abs() < 1e-12));
        assert_eq!(z.b.len(), n - 1);
    }

    #[test]
    fn unsupervised_gradient_is_minus_precision() {
        let inp = ModelInputs::new(vec![1.0, 4.0, 0.0, 2.0], vec![0.0, 0.0], vec![1.0; 2], Design::Identity(2)).unwrap();
        let mut s = FitState::initial(&inp);
        s.gamma = vec![0.4, -1.0];
        let lam = Precision {
            diag: vec![2.0, 3.0],
            off: vec![(0, 1, -0.5)],
        };
        let g = grad_gamma(&inp, &s, &lam).unwrap();
        let lg = lam.apply(&s.gamma);
        assert!((g[0] + lg[0]).abs() < 1e-14 && (g[1] + lg[1]).abs() < 1e-14);
    }

    #[test]
    fn k_gradient_sign() {
        let inp = ModelInputs::new(vec![0.0; 4], vec![0.0; 2], vec![1e3; 2], Design::Identity(2)).unwrap();
        let s = FitState::initial(&inp);
        assert!(grad_k(&inp, &s).unwrap().a < -1.0);
    }

    #[test]
    fn clamp_keeps_values_finite() {
        let inp = ModelInputs::new(vec![1.0], vec![1.0], vec![1.0], Design::Identity(1)).unwrap();
        let mut s = FitState::initial(&inp);
        s.gamma = vec![40.0];
        let (v, g) = objective(&inp, &s, &Precision::zeros(1), true).unwrap();
        assert!(v.is_finite() && g.unwrap().iter().all(|x| x.is_finite()));
        s.gamma = vec![f64::NAN];
        assert!(matches!(gva_lower_bound(&inp, &s), Err(Error::NonFinite { i: 0, j: 0 })));
    }

    #[test]
    fn posterior_oracle_basics() {
        let grid = [0.0, 1.0, 2.0];
        let prior = [0.2, 0.5, 0.3];
        let p = posterior_response_oracle(&[3.0, 1.0], &[0.0, 0.0], &[0.1, -0.2], &grid, &prior).unwrap();
        for (a, b) in p.iter().zip(prior) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn pairwise_matches_plain_sum_on_integers() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499500.0);
        let cs = column_sums(&v, 100, 10);
        assert_eq!(cs[0], (0..100).map(|r| (r * 10) as f64).sum::<f64>());
    }
}
