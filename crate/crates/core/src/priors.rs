//! Shrinkage priors: the fused GDP prior on tree coefficients and the
//! leaf-space baselines (GDP, GDP-based fused lasso, GDP-based pairwise fused
//! lasso).
//!
//! Every prior is a product of generalized double Pareto terms on single
//! coefficients (sparsity) and on pairwise differences (fusion). The latent
//! scale mixture is never materialized: each E-step collapses it into
//! reweighting expectations `ρ` (per coefficient) and `υ` (per pair), which
//! assemble into a sparse precision matrix `Λ̃` for the M-step.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::quad;
use crate::tree::PartitionTree;
use crate::{Error, Result};

/// Absolute values below this are clamped in E-step denominators.
pub const COEF_CLAMP: f64 = 1e-8;

/// Which coefficients are shrunk and how pairs are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// Independent GDP on each leaf coefficient.
    GdpBeta,
    /// GDP on leaves plus GDP on adjacent differences `β_j − β_{j+1}`.
    FlsaBeta,
    /// GDP on leaves plus GDP on every difference `β_j − β_k`, `j < k`.
    PflBeta,
    /// GDP on every tree coefficient plus GDP on sibling differences.
    FgdpGamma,
}

impl PriorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PriorKind::GdpBeta => "gdp_beta",
            PriorKind::FlsaBeta => "flsa_beta",
            PriorKind::PflBeta => "pfl_beta",
            PriorKind::FgdpGamma => "fgdp_gamma",
        }
    }

    /// True when coefficients live on tree nodes rather than leaves.
    pub fn is_tree_space(self) -> bool {
        self == PriorKind::FgdpGamma
    }
}

impl FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gdp_beta" | "gdp" => Ok(PriorKind::GdpBeta),
            "flsa_beta" | "flsa" => Ok(PriorKind::FlsaBeta),
            "pfl_beta" | "pfl" => Ok(PriorKind::PflBeta),
            "fgdp_gamma" | "fgdp" => Ok(PriorKind::FgdpGamma),
            other => Err(Error::arg(format!("unknown prior kind `{other}`"))),
        }
    }
}

/// Hyperparameters of one prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub kind: PriorKind,
    pub alpha1: f64,
    pub eta1: f64,
    /// Fusion component; ignored by `GdpBeta`.
    pub alpha2: f64,
    pub eta2: f64,
    /// Sparsity weight of the pairwise fused lasso (fusion gets `1 − θ`).
    /// Ignored by the other kinds.
    pub theta: f64,
}

/// The named variants, in display order.
pub const PRIOR_NAMES: [&str; 15] = [
    "gdp0", "gdp", "flsa", "pfl-s", "pfl-f", "fgdp-s", "fgdp-f", "fgdp", "fgdp-nj", "fgdp1",
    "fgdp2", "fgdp3", "fgdp4", "fgdp5", "fgdp6",
];

impl PriorSpec {
    pub fn new(kind: PriorKind, alpha1: f64, eta1: f64, alpha2: f64, eta2: f64, theta: f64) -> Result<Self> {
        let spec = PriorSpec {
            kind,
            alpha1,
            eta1,
            alpha2,
            eta2,
            theta,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn fgdp(a1: f64, e1: f64, a2: f64, e2: f64) -> Self {
        PriorSpec {
            kind: PriorKind::FgdpGamma,
            alpha1: a1,
            eta1: e1,
            alpha2: a2,
            eta2: e2,
            theta: 1.0,
        }
    }

    fn beta(kind: PriorKind, a1: f64, e1: f64, a2: f64, e2: f64, theta: f64) -> Self {
        PriorSpec {
            kind,
            alpha1: a1,
            eta1: e1,
            alpha2: a2,
            eta2: e2,
            theta,
        }
    }

    /// Look up a named variant (case-insensitive, `_` and `-` interchangeable).
    pub fn named(name: &str) -> Option<Self> {
        use PriorKind::*;
        let key = name.trim().to_ascii_lowercase().replace('_', "-");
        Some(match key.as_str() {
            "gdp0" | "gdp-0" => Self::beta(GdpBeta, -1.0, 1.0, 0.0, 0.0, 1.0),
            "gdp" => Self::beta(GdpBeta, 1.0, 1.0, 0.0, 0.0, 1.0),
            "flsa" => Self::beta(FlsaBeta, 1.0, 1.0, 1.0, 1.0, 1.0),
            "pfl-s" => Self::beta(PflBeta, 1.0, 1.0, 1.0, 1.0, 0.8),
            "pfl-f" => Self::beta(PflBeta, 1.0, 1.0, 1.0, 1.0, 0.2),
            "fgdp-s" => Self::fgdp(1.0, 1.0, -1.0, 1.0),
            "fgdp-f" => Self::fgdp(-1.0, 1.0, 1.0, 1.0),
            "fgdp" => Self::fgdp(1.0, 1.0, 1.0, 1.0),
            "fgdp-nj" => Self::fgdp(0.0, 0.0, 0.0, 0.0),
            "fgdp1" => Self::fgdp(1.0, 0.1, 1.0, 0.1),
            "fgdp2" => Self::fgdp(1.0, 0.01, 1.0, 0.01),
            "fgdp3" => Self::fgdp(1.0, 0.001, 1.0, 0.001),
            "fgdp4" => Self::fgdp(0.5, 0.01, 0.5, 0.01),
            "fgdp5" => Self::fgdp(2.0, 0.01, 2.0, 0.01),
            "fgdp6" => Self::fgdp(5.0, 0.01, 5.0, 0.01),
            _ => return None,
        })
    }

    /// Parse `kind,a1,e1,a2,e2[,theta]`.
    pub fn from_params(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if !(parts.len() == 5 || parts.len() == 6) {
            return Err(Error::arg(format!(
                "prior parameters must be kind,a1,e1,a2,e2[,theta], got `{s}`"
            )));
        }
        let kind: PriorKind = parts[0].parse()?;
        let num = |i: usize| -> Result<f64> {
            parts[i]
                .parse::<f64>()
                .map_err(|_| Error::arg(format!("bad prior parameter `{}`", parts[i])))
        };
        let theta = if parts.len() == 6 { num(5)? } else { 1.0 };
        Self::new(kind, num(1)?, num(2)?, num(3)?, num(4)?, theta)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.alpha1, self.eta1, self.alpha2, self.eta2, self.theta];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("prior parameters must be finite"));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::arg(format!("theta must lie in [0, 1], got {}", self.theta)));
        }
        if self.eta1 < 0.0 || self.eta2 < 0.0 {
            return Err(Error::arg("eta must be non-negative"));
        }
        if self.alpha1 < -1.0 || self.alpha2 < -1.0 {
            return Err(Error::arg("alpha below -1 gives a negative penalty weight"));
        }
        Ok(())
    }

    /// `ξ₁ = η₁/α₁` when defined.
    pub fn xi1(&self) -> Option<f64> {
        (self.alpha1 != 0.0).then(|| self.eta1 / self.alpha1)
    }

    pub fn xi2(&self) -> Option<f64> {
        (self.alpha2 != 0.0).then(|| self.eta2 / self.alpha2)
    }

    fn sparsity_weight(&self) -> f64 {
        match self.kind {
            PriorKind::PflBeta => self.theta,
            _ => 1.0,
        }
    }

    fn fusion_weight(&self) -> f64 {
        match self.kind {
            PriorKind::PflBeta => 1.0 - self.theta,
            PriorKind::GdpBeta => 0.0,
            _ => 1.0,
        }
    }

    /// Index pairs whose differences carry a fusion term, for coefficients
    /// of length `dim`.
    pub fn pairs(&self, dim: usize, tree: Option<&PartitionTree>) -> Result<Vec<(usize, usize)>> {
        match self.kind {
            PriorKind::GdpBeta => Ok(Vec::new()),
            PriorKind::FlsaBeta => Ok((1..dim).map(|j| (j - 1, j)).collect()),
            PriorKind::PflBeta => Ok((0..dim)
                .flat_map(|j| (j + 1..dim).map(move |k| (j, k)))
                .collect()),
            PriorKind::FgdpGamma => {
                let tree = tree.ok_or_else(|| Error::arg("the fused GDP prior needs a partition tree"))?;
                if tree.num_nodes() != dim {
                    return Err(Error::Shape(format!(
                        "tree has {} nodes but {dim} coefficients were supplied",
                        tree.num_nodes()
                    )));
                }
                Ok(tree.sibling_pairs())
            }
        }
    }
}

impl fmt::Display for PriorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{}",
            self.kind.as_str(),
            self.alpha1,
            self.eta1,
            self.alpha2,
            self.eta2
        )?;
        if self.kind == PriorKind::PflBeta {
            write!(f, ",{}", self.theta)?;
        }
        Ok(())
    }
}

impl FromStr for PriorSpec {
    type Err = Error;

    /// A named variant, or explicit `kind,a1,e1,a2,e2[,theta]`.
    fn from_str(s: &str) -> Result<Self> {
        if s.contains(',') {
            return Self::from_params(s);
        }
        Self::named(s).ok_or_else(|| {
            Error::arg(format!(
                "unknown prior `{s}`; valid names: {}",
                PRIOR_NAMES.join(", ")
            ))
        })
    }
}

/// `(α+1)/(|v|(|v|+η))` with `|v|` clamped below.
pub fn reweight(value: f64, alpha: f64, eta: f64) -> f64 {
    if alpha + 1.0 == 0.0 {
        return 0.0;
    }
    let a = value.abs().max(COEF_CLAMP);
    (alpha + 1.0) / (a * (a + eta))
}

/// The penalty `(α+1)·ln(|v|+η)` whose tangent in `v²` is the quadratic the
/// E-step builds. Below the clamp it continues linearly in `v²`, so the
/// clamped reweighting stays an exact tangent.
pub fn clamped_penalty(value: f64, alpha: f64, eta: f64) -> f64 {
    if alpha + 1.0 == 0.0 {
        return 0.0;
    }
    let a = value.abs();
    if a >= COEF_CLAMP {
        (alpha + 1.0) * (a + eta).ln()
    } else {
        let e = COEF_CLAMP;
        (alpha + 1.0) * ((e + eta).ln() + (a * a - e * e) / (2.0 * e * (e + eta)))
    }
}

/// E-step expectations for one coefficient vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EStepWeights {
    /// `⟨ρ_l⟩`, one per coefficient.
    pub rho: Vec<f64>,
    /// Fusion pairs `(u, w)`, `u < w`.
    pub pairs: Vec<(usize, usize)>,
    /// `⟨υ⟩`, one per pair.
    pub upsilon: Vec<f64>,
}

pub fn estep_weights(coeffs: &[f64], prior: &PriorSpec, tree: Option<&PartitionTree>) -> Result<EStepWeights> {
    let pairs = prior.pairs(coeffs.len(), tree)?;
    let ws = prior.sparsity_weight();
    let wf = prior.fusion_weight();
    let rho = coeffs
        .iter()
        .map(|&g| ws * reweight(g, prior.alpha1, prior.eta1))
        .collect();
    let upsilon = pairs
        .iter()
        .map(|&(u, w)| wf * reweight(coeffs[u] - coeffs[w], prior.alpha2, prior.eta2))
        .collect();
    Ok(EStepWeights { rho, pairs, upsilon })
}

/// Sparse symmetric precision `Λ̃ = diag(ρ) + Σ υ (e_u − e_w)(e_u − e_w)ᵀ`,
/// stored as its diagonal plus one off-diagonal entry per pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Precision {
    pub diag: Vec<f64>,
    /// `(u, w, Λ̃_uw)` with `u < w`.
    pub off: Vec<(usize, usize, f64)>,
}

pub fn assemble_precision(weights: &EStepWeights) -> Result<Precision> {
    if weights.pairs.len() != weights.upsilon.len() {
        return Err(Error::Shape("one upsilon per pair".into()));
    }
    let dim = weights.rho.len();
    let mut diag = weights.rho.clone();
    let mut off = Vec::with_capacity(weights.pairs.len());
    for (&(u, w), &v) in weights.pairs.iter().zip(&weights.upsilon) {
        if u >= dim || w >= dim || u == w {
            return Err(Error::Shape(format!("pair ({u}, {w}) outside dimension {dim}")));
        }
        diag[u] += v;
        diag[w] += v;
        off.push((u.min(w), u.max(w), -v));
    }
    Ok(Precision { diag, off })
}

impl Precision {
    pub fn zeros(dim: usize) -> Self {
        Precision {
            diag: vec![0.0; dim],
            off: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = self.diag.iter().zip(v).map(|(d, x)| d * x).collect();
        for &(u, w, a) in &self.off {
            out[u] += a * v[w];
            out[w] += a * v[u];
        }
        out
    }

    pub fn quad_form(&self, v: &[f64]) -> f64 {
        self.apply(v).iter().zip(v).map(|(a, b)| a * b).sum()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        let mut m = vec![vec![0.0; n]; n];
        for (i, d) in self.diag.iter().enumerate() {
            m[i][i] = *d;
        }
        for &(u, w, a) in &self.off {
            m[u][w] += a;
            m[w][u] += a;
        }
        m
    }
}

/// The penalty the E-step majorizes: `Σ w₁·G(γ_l) + Σ w₂·G(γ_u − γ_w)` with
/// `G` the clamped log penalty. The EM objective is the variational bound
/// minus this value.
pub fn penalty(coeffs: &[f64], prior: &PriorSpec, tree: Option<&PartitionTree>) -> Result<f64> {
    let pairs = prior.pairs(coeffs.len(), tree)?;
    let s: f64 = coeffs
        .iter()
        .map(|&g| clamped_penalty(g, prior.alpha1, prior.eta1))
        .sum();
    let f: f64 = pairs
        .iter()
        .map(|&(u, w)| clamped_penalty(coeffs[u] - coeffs[w], prior.alpha2, prior.eta2))
        .sum();
    Ok(prior.sparsity_weight() * s + prior.fusion_weight() * f)
}

fn gdp_log_density(v: f64, alpha: f64, eta: f64) -> Result<f64> {
    if alpha <= 0.0 || eta <= 0.0 {
        return Err(Error::UnsupportedDensity { alpha, eta });
    }
    let xi = eta / alpha;
    Ok(-(2.0 * xi).ln() - (alpha + 1.0) * (v.abs() / (alpha * xi)).ln_1p())
}

/// Log prior density: GDP terms over coefficients and over fusion pairs.
pub fn log_prior_density(coeffs: &[f64], prior: &PriorSpec, tree: Option<&PartitionTree>) -> Result<f64> {
    let pairs = prior.pairs(coeffs.len(), tree)?;
    let mut s = 0.0;
    for &g in coeffs {
        s += gdp_log_density(g, prior.alpha1, prior.eta1)?;
    }
    let mut f = 0.0;
    for &(u, w) in &pairs {
        f += gdp_log_density(coeffs[u] - coeffs[w], prior.alpha2, prior.eta2)?;
    }
    Ok(prior.sparsity_weight() * s + prior.fusion_weight() * f)
}

/// `E[1/τ]` by numerical integration of the latent hierarchy: given the rate
/// `λ`, the inverse scale has mean `λ/|γ|`; `λ | γ ~ Ga(α+1, |γ|+η)` is
/// integrated out by adaptive quadrature.
pub fn estep_quadrature_oracle(gamma_value: f64, alpha: f64, eta: f64) -> Result<f64> {
    let a = gamma_value.abs();
    if alpha <= 0.0 || eta <= 0.0 || a <= 0.0 {
        return Err(Error::arg("oracle needs alpha > 0, eta > 0, gamma != 0"));
    }
    let shape = alpha + 1.0;
    let rate = a + eta;
    let log_norm = shape * rate.ln() - libm::lgamma(shape);
    let density = |l: f64| {
        if l <= 0.0 {
            return 0.0;
        }
        (log_norm + (shape - 1.0) * l.ln() - rate * l).exp()
    };
    let scale = shape / rate;
    let mass = quad::integrate_half_line(density, scale, 1e-12, 0.0)?;
    let first = quad::integrate_half_line(|l| l / a * density(l), scale, 1e-12, 0.0)?;
    if !(mass.is_finite() && first.is_finite()) || (mass - 1.0).abs() > 1e-6 {
        return Err(Error::Quadrature(format!("rate density integrates to {mass}")));
    }
    Ok(first / mass)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_quad(m: &[Vec<f64>], v: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..v.len() {
            for j in 0..v.len() {
                s += v[i] * m[i][j] * v[j];
            }
        }
        s
    }

    #[test]
    fn reweighting_examples() {
        assert!((reweight(1.0, 1.0, 0.01) - 2.0 / 1.01).abs() < 1e-15);
        assert_eq!(reweight(0.7, -1.0, 1.0), 0.0);
        let e = COEF_CLAMP;
        assert_eq!(reweight(0.0, 1.0, 1.0), 2.0 / (e * (e + 1.0)));
        // normal-Jeffreys
        assert!((reweight(0.5, 0.0, 0.0) - 4.0).abs() < 1e-15);
        assert_eq!(reweight(-0.3, 2.0, 0.1), reweight(0.3, 2.0, 0.1));
    }

    #[test]
    fn named_table() {
        for name in PRIOR_NAMES {
            let p = PriorSpec::named(name).unwrap();
            p.validate().unwrap();
        }
        let p: PriorSpec = "fgdp2".parse().unwrap();
        assert_eq!((p.alpha1, p.eta1, p.alpha2, p.eta2), (1.0, 0.01, 1.0, 0.01));
        assert_eq!(PriorSpec::named("PFL-F").unwrap().theta, 0.2);
        assert_eq!(PriorSpec::named("gdp0").unwrap().kind, PriorKind::GdpBeta);
        let err = "fgdp9".parse::<PriorSpec>().unwrap_err().to_string();
        assert!(err.contains("fgdp2") && err.contains("pfl-s"));
        let p: PriorSpec = "pfl_beta,1,1,1,1,0.3".parse().unwrap();
        assert_eq!(p.theta, 0.3);
        assert_eq!(p.to_string().parse::<PriorSpec>().unwrap(), p);
        assert!("pfl_beta,1,1,1,1,1.5".parse::<PriorSpec>().is_err());
    }

    #[test]
    fn smallest_fused_block() {
        let tree = PartitionTree::canonical(1).unwrap();
        let w = EStepWeights {
            rho: vec![1.0, 2.0, 3.0],
            pairs: tree.sibling_pairs(),
            upsilon: vec![0.5],
        };
        let p = assemble_precision(&w).unwrap();
        assert_eq!(
            p.to_dense(),
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 2.5, -0.5], vec![0.0, -0.5, 3.5]]
        );
    }

    #[test]
    fn flsa_tridiagonal() {
        let prior = PriorSpec::named("flsa").unwrap();
        let pairs = prior.pairs(3, None).unwrap();
        let w = EStepWeights {
            rho: vec![1.0, 2.0, 3.0],
            pairs,
            upsilon: vec![10.0, 20.0],
        };
        let d = assemble_precision(&w).unwrap().to_dense();
        assert_eq!(
            d,
            vec![
                vec![11.0, -10.0, 0.0],
                vec![-10.0, 32.0, -20.0],
                vec![0.0, -20.0, 23.0]
            ]
        );
    }

    #[test]
    fn pfl_weights_carry_theta() {
        let prior = PriorSpec::named("pfl-s").unwrap();
        let w = estep_weights(&[1.0, 0.0, -1.0], &prior, None).unwrap();
        assert_eq!(w.pairs, vec![(0, 1), (0, 2), (1, 2)]);
        assert!((w.rho[0] - 0.8 * 1.0).abs() < 1e-15);
        assert!((w.upsilon[1] - 0.2 * 2.0 / (2.0 * 3.0)).abs() < 1e-15);
        let d = assemble_precision(&w).unwrap().to_dense();
        for r in &d {
            assert_eq!(r.len(), 3);
        }
        assert!((d[0][0] - (w.rho[0] + w.upsilon[0] + w.upsilon[1])).abs() < 1e-12);
    }

    #[test]
    fn quadratic_form_matches_dense() {
        let tree = PartitionTree::canonical(3).unwrap();
        let g: Vec<f64> = (0..15).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
        let prior = PriorSpec::named("fgdp2").unwrap();
        let w = estep_weights(&g, &prior, Some(&tree)).unwrap();
        let p = assemble_precision(&w).unwrap();
        let v: Vec<f64> = (0..15).map(|i| (i as f64).sin()).collect();
        let a = p.quad_form(&v);
        let b = dense_quad(&p.to_dense(), &v);
        assert!((a - b).abs() <= 1e-9 * b.abs());
    }

    #[test]
    fn log_density_examples() {
        let tree = PartitionTree::canonical(1).unwrap();
        let p = PriorSpec::named("fgdp").unwrap();
        let v = log_prior_density(&[0.0; 3], &p, Some(&tree)).unwrap();
        assert!((v + 4.0 * 2f64.ln()).abs() < 1e-14);
        let g = PriorSpec::named("gdp").unwrap();
        assert!((log_prior_density(&[0.0], &g, None).unwrap() + 2f64.ln()).abs() < 1e-15);
        let x = [0.3, -1.2, 2.0];
        assert_eq!(
            log_prior_density(&x, &p, Some(&tree)).unwrap(),
            log_prior_density(&x.map(|v| -v), &p, Some(&tree)).unwrap()
        );
        assert!(matches!(
            log_prior_density(&[0.1], &PriorSpec::named("gdp0").unwrap(), None),
            Err(Error::UnsupportedDensity { .. })
        ));
    }

    #[test]
    fn clamped_penalty_is_tangent_consistent() {
        // derivative in u = v² equals half the reweighting, on both sides of the clamp
        for &(v, a, e) in &[(0.5, 1.0, 0.01), (3e-9, 1.0, 0.01), (2.0, 0.0, 0.0), (1e-9, 5.0, 1.0)] {
            let u: f64 = v * v;
            // linear below the clamp, so a wide step is exact there and avoids cancellation
            let h = if v < COEF_CLAMP { 0.5 * u } else { 1e-6 * u };
            let d = (clamped_penalty((u + h).sqrt(), a, e) - clamped_penalty((u - h).sqrt(), a, e)) / (2.0 * h);
            let r = reweight(v, a, e) / 2.0;
            assert!((d - r).abs() <= 1e-5 * r, "{v} {a} {e}: {d} vs {r}");
        }
        assert_eq!(clamped_penalty(0.4, -1.0, 1.0), 0.0);
    }

    #[test]
    fn oracle_closed_form_point() {
        let v = estep_quadrature_oracle(1.0, 1.0, 1.0).unwrap();
        assert!((v - 1.0).abs() < 1e-10);
        assert!(estep_quadrature_oracle(0.0, 1.0, 1.0).is_err());
    }
}
