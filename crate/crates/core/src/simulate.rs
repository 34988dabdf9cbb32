//! Simulation study: synthetic multiscale signals, evaluation metrics, and
//! the replication / multi-start drivers.
//!
//! Data follow the fitted model exactly: `t_i ~ Ga(2, 1)`,
//! `y_i ~ Poisson(0.5)`, `a, b_i, c_j ~ N(0, 0.1)` (variance), corner
//! effects zero, and `x_ij ~ Poisson(t_i·exp(a + b_i + c_j + y_i·β*_j))` on
//! the canonical height-5 tree.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand_distr::{Distribution, Gamma, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{fit, EmConfig, FitResult};
use crate::ingest::{PrimitiveObject, Replicate, SpinDataset};
use crate::model::{Design, ModelInputs};
use crate::priors::PriorSpec;
use crate::rng::{stream_rng, Stream};
use crate::tree::PartitionTree;
use crate::{Error, Result};

/// Height of the simulation tree; the signals are defined on 32 leaves.
pub const SIM_HEIGHT: u32 = 5;

/// Threshold below which coefficients (or coefficient spreads) count as zero.
pub const DEFAULT_THRESHOLD: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    A,
    B,
    C,
    D,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::A, Scenario::B, Scenario::C, Scenario::D];

    /// The true leaf coefficients.
    pub fn beta_star(self) -> Vec<f64> {
        let blocks = |vals: &[f64], width: usize| -> Vec<f64> {
            vals.iter().flat_map(|&v| std::iter::repeat_n(v, width)).collect()
        };
        match self {
            Scenario::A => vec![
                1., 1., 0., 0., 1., 1., 0., 0., 1., 1., -1., -1., 0., 0., -1., -1., 1., 1., 0., 0., 1., 1., 0.,
                0., -1., -1., 1., 1., 0., 0., 1., 1.,
            ],
            Scenario::B => blocks(&[1., 0., -1., 0., 1., -1., 0., 1.], 4),
            Scenario::C => blocks(&[1., 0., -1., 0.], 8),
            Scenario::D => {
                let mut v = vec![1., 1., 0., 0.];
                v.extend(blocks(&[-1.], 4));
                v.extend(blocks(&[0.], 8));
                v.extend(blocks(&[1.], 16));
                v
            }
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Scenario::A => "a",
            Scenario::B => "b",
            Scenario::C => "c",
            Scenario::D => "d",
        };
        f.write_str(s)
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" => Ok(Scenario::A),
            "b" => Ok(Scenario::B),
            "c" => Ok(Scenario::C),
            "d" => Ok(Scenario::D),
            other => Err(Error::arg(format!("unknown configuration `{other}` (expected a, b, c or d)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub config: Scenario,
    pub n: usize,
    pub h: u32,
    pub seed: u64,
    pub replications: usize,
}

impl SimConfig {
    pub fn new(config: Scenario, n: usize, seed: u64, replications: usize) -> Self {
        SimConfig {
            config,
            n,
            h: SIM_HEIGHT,
            seed,
            replications,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::arg("simulation needs n >= 2"));
        }
        if self.h != SIM_HEIGHT {
            return Err(Error::arg(format!("the simulation signals are defined for h = {SIM_HEIGHT}")));
        }
        Ok(())
    }
}

/// Random effects used to generate one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueEffects {
    pub a: f64,
    /// Full length `n`, `b[0] = 0`.
    pub b: Vec<f64>,
    /// Full length `m`, `c[0] = 0`.
    pub c: Vec<f64>,
}

/// One simulated dataset, independent of the prior that will be fitted.
#[derive(Debug, Clone, PartialEq)]
pub struct SimData {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub t: Vec<f64>,
    pub beta_star: Vec<f64>,
    pub effects: TrueEffects,
    pub tree: PartitionTree,
}

impl SimData {
    /// Model inputs in the coefficient space the prior lives in.
    pub fn inputs_for(&self, prior: &PriorSpec) -> Result<ModelInputs> {
        let design = if prior.kind.is_tree_space() {
            Design::Tree(self.tree.design_matrix())
        } else {
            Design::Identity(self.tree.num_leaves())
        };
        ModelInputs::new(self.x.clone(), self.y.clone(), self.t.clone(), design)
    }
}

/// Dataset for replication `rep`. Draw order: `t`, `y`, `a`, `b_2..n`,
/// `c_2..m`, then counts row by row.
pub fn generate_replicate(config: &SimConfig, rep: u64) -> Result<SimData> {
    config.validate()?;
    let n = config.n;
    let tree = PartitionTree::canonical(config.h)?;
    let m = tree.num_leaves();
    let beta_star = config.config.beta_star();
    let mut rng = stream_rng(config.seed, Stream::SimulationData, rep);
    let gamma = Gamma::new(2.0, 1.0).expect("valid shape");
    let poisson_y = Poisson::new(0.5).expect("valid rate");
    let normal = Normal::new(0.0, 0.1f64.sqrt()).expect("valid sd");
    let t: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng)).collect();
    let y: Vec<f64> = (0..n).map(|_| poisson_y.sample(&mut rng)).collect();
    let a = normal.sample(&mut rng);
    let mut b = vec![0.0; n];
    for v in b.iter_mut().skip(1) {
        *v = normal.sample(&mut rng);
    }
    let mut c = vec![0.0; m];
    for v in c.iter_mut().skip(1) {
        *v = normal.sample(&mut rng);
    }
    let mut x = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            let mu = t[i] * (a + b[i] + c[j] + y[i] * beta_star[j]).exp();
            x.push(Poisson::new(mu).map_err(|e| Error::arg(e.to_string()))?.sample(&mut rng));
        }
    }
    Ok(SimData {
        x,
        y,
        t,
        beta_star,
        effects: TrueEffects { a, b, c },
        tree,
    })
}

/// First replication of `config`, as model inputs for the given prior.
pub fn generate(config: &SimConfig, prior: &PriorSpec) -> Result<(ModelInputs, Vec<f64>, TrueEffects)> {
    let d = generate_replicate(config, 0)?;
    Ok((d.inputs_for(prior)?, d.beta_star.clone(), d.effects))
}

fn f1(tp: usize, fp: usize, fneg: usize) -> f64 {
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn f1_of(pred: impl Iterator<Item = bool>, truth: impl Iterator<Item = bool>) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0, 0, 0);
    for (p, t) in pred.zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    f1(tp, fp, fneg)
}

/// F1 of "coefficient is non-zero" decisions.
pub fn f1_selection(beta_hat: &[f64], beta_star: &[f64], threshold: f64) -> f64 {
    assert_eq!(beta_hat.len(), beta_star.len());
    f1_of(
        beta_hat.iter().map(|b| b.abs() > threshold),
        beta_star.iter().map(|b| *b != 0.0),
    )
}

fn spread(v: &[f64]) -> f64 {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    hi - lo
}

/// F1 of "all leaves under this internal node share one coefficient"
/// decisions, one per internal node.
pub fn f1_fusion(beta_hat: &[f64], beta_star: &[f64], tree: &PartitionTree, threshold: f64) -> f64 {
    assert_eq!(beta_hat.len(), tree.num_leaves());
    assert_eq!(beta_star.len(), tree.num_leaves());
    let nodes: Vec<_> = tree.internal_nodes().map(|n| tree.descendant_range(n)).collect();
    f1_of(
        nodes.iter().map(|r| spread(&beta_hat[r.clone()]) <= threshold),
        nodes.iter().map(|r| spread(&beta_star[r.clone()]) == 0.0),
    )
}

/// `‖β̂ − β*‖ / ‖β*‖`.
pub fn rmse(beta_hat: &[f64], beta_star: &[f64]) -> Result<f64> {
    let den: f64 = beta_star.iter().map(|v| v * v).sum::<f64>().sqrt();
    if den == 0.0 {
        return Err(Error::arg("relative error is undefined for an all-zero truth"));
    }
    let num: f64 = beta_hat
        .iter()
        .zip(beta_star)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(num / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub config: Scenario,
    pub n: usize,
    pub prior: String,
    pub rep: u64,
    pub f1_fusion: f64,
    pub f1_selection: f64,
    pub rmse: f64,
    pub em_iters: usize,
    pub converged: bool,
    pub seconds: f64,
}

/// A fit that raised an error; the study records it and carries on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedFit {
    pub config: Scenario,
    pub n: usize,
    pub prior: String,
    pub rep: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOutput {
    pub rows: Vec<MetricsRow>,
    pub failures: Vec<FailedFit>,
    /// EM objective paths (initial value first), parallel to `rows`.
    #[serde(skip)]
    pub traces: Vec<Vec<f64>>,
}

/// Fit one prior to one replication. The EM seed is the simulation seed and
/// the initialization index is the replication, so every prior in a
/// replication starts from the same random draws.
pub fn run_replication(sim: &SimConfig, rep: u64, data: &SimData, name: &str, prior: &PriorSpec, em: &EmConfig) -> Result<(MetricsRow, FitResult)> {
    let inputs = data.inputs_for(prior)?;
    let cfg = EmConfig {
        seed: sim.seed,
        init_index: rep,
        ..*em
    };
    let tree = prior.kind.is_tree_space().then_some(&data.tree);
    let start = Instant::now();
    let res = fit(&inputs, prior, tree, &cfg)?;
    let seconds = start.elapsed().as_secs_f64();
    let row = MetricsRow {
        config: sim.config,
        n: sim.n,
        prior: name.to_string(),
        rep,
        f1_fusion: f1_fusion(&res.beta_hat, &data.beta_star, &data.tree, DEFAULT_THRESHOLD),
        f1_selection: f1_selection(&res.beta_hat, &data.beta_star, DEFAULT_THRESHOLD),
        rmse: rmse(&res.beta_hat, &data.beta_star)?,
        em_iters: res.iterations,
        converged: res.converged,
        seconds,
    };
    Ok((row, res))
}

/// Every (configuration, replication, prior) combination, fitted in
/// parallel and reported in deterministic order.
pub fn run_study(configs: &[SimConfig], priors: &[(String, PriorSpec)], em: &EmConfig) -> Result<StudyOutput> {
    let mut tasks = Vec::new();
    for (ci, c) in configs.iter().enumerate() {
        c.validate()?;
        for rep in 0..c.replications as u64 {
            tasks.push((ci, rep));
        }
    }
    let per_task: Vec<Vec<std::result::Result<(MetricsRow, Vec<f64>), FailedFit>>> = tasks
        .par_iter()
        .map(|&(ci, rep)| {
            let sim = &configs[ci];
            let data = generate_replicate(sim, rep);
            priors
                .par_iter()
                .map(|(name, prior)| {
                    let failed = |e: Error| FailedFit {
                        config: sim.config,
                        n: sim.n,
                        prior: name.clone(),
                        rep,
                        error: e.to_string(),
                    };
                    let data = data.as_ref().map_err(|e| failed(Error::arg(e.to_string())))?;
                    run_replication(sim, rep, data, name, prior, em)
                        .map(|(row, res)| (row, objective_path(&res)))
                        .map_err(failed)
                })
                .collect()
        })
        .collect();
    let mut out = StudyOutput {
        rows: Vec::new(),
        failures: Vec::new(),
        traces: Vec::new(),
    };
    for r in per_task.into_iter().flatten() {
        match r {
            Ok((row, trace)) => {
                out.rows.push(row);
                out.traces.push(trace);
            }
            Err(f) => out.failures.push(f),
        }
    }
    Ok(out)
}

/// Initial objective followed by the value after every EM iteration.
pub fn objective_path(res: &FitResult) -> Vec<f64> {
    std::iter::once(res.initial_objective)
        .chain(res.trace.iter().map(|e| e.objective))
        .collect()
}

/// Whether `path` never drops by more than `slack`.
pub fn is_monotone(path: &[f64], slack: f64) -> bool {
    path.windows(2).all(|w| w[1] >= w[0] - slack)
}

/// Synthetic passing corpus for scale checks: `q` passes spread over `n`
/// replicates, origins clustered around a handful of hot spots on a
/// 120×80 pitch, destinations displaced forward. Responses are Poisson(0.5)
/// and exposures Ga(2, 1), as in the simulation study.
pub fn synthetic_corpus(q: usize, n: usize, seed: u64) -> Result<SpinDataset> {
    use rand::Rng;
    if n == 0 || q < n {
        return Err(Error::arg("need at least one pass per replicate"));
    }
    let mut rng = stream_rng(seed, Stream::SimulationData, u64::MAX);
    let spots: Vec<[f64; 2]> = (0..12)
        .map(|_| [rng.random_range(10.0..110.0), rng.random_range(5.0..75.0)])
        .collect();
    let jitter = Normal::new(0.0, 8.0).expect("valid sd");
    let reach = Normal::new(12.0, 10.0).expect("valid sd");
    let clamp = |v: f64, hi: f64| v.clamp(0.0, hi);
    let mut pos = Vec::with_capacity(q);
    let mut members = vec![Vec::new(); n];
    for k in 0..q {
        // every replicate gets at least one pass
        let r = if k < n { k } else { rng.random_range(0..n) };
        let s = spots[rng.random_range(0..spots.len())];
        let o = [clamp(s[0] + jitter.sample(&mut rng), 120.0), clamp(s[1] + jitter.sample(&mut rng), 80.0)];
        let d = [
            clamp(o[0] + reach.sample(&mut rng), 120.0),
            clamp(o[1] + jitter.sample(&mut rng), 80.0),
        ];
        members[r].push(k);
        pos.push(PrimitiveObject {
            origin: o,
            destination: d,
            replicate_index: r,
        });
    }
    let gamma = Gamma::new(2.0, 1.0).expect("valid shape");
    let poisson_y = Poisson::new(0.5).expect("valid rate");
    let replicates = members
        .into_iter()
        .enumerate()
        .map(|(i, po_indices)| Replicate {
            id: format!("r{i}"),
            response: poisson_y.sample(&mut rng),
            exposure: gamma.sample(&mut rng),
            po_indices,
        })
        .collect();
    Ok(SpinDataset {
        label: format!("synthetic-{q}"),
        pos,
        replicates,
    })
}

pub const CSV_HEADER: [&str; 9] = ["config", "n", "prior", "rep", "f1_fusion", "f1_selection", "rmse", "em_iters", "seconds"];

pub fn write_study_csv<W: std::io::Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::arg(format!("csv write failed: {e}"));
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in rows {
        w.write_record([
            r.config.to_string(),
            r.n.to_string(),
            r.prior.clone(),
            r.rep.to_string(),
            r.f1_fusion.to_string(),
            r.f1_selection.to_string(),
            r.rmse.to_string(),
            r.em_iters.to_string(),
            format!("{:.4}", r.seconds),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Results of refitting one dataset from many random starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiStart {
    pub fits: Vec<FitResult>,
    /// `‖β̂_a − β̂_b‖` for every pair `a < b`.
    pub beta_distances: Vec<f64>,
    pub gamma_distances: Vec<f64>,
}

fn pairwise_distances(v: &[Vec<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for a in 0..v.len() {
        for b in a + 1..v.len() {
            out.push(v[a].iter().zip(&v[b]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt());
        }
    }
    out
}

/// Fit `starts` random initializations (indices `0..starts`) to replication
/// `rep` of `sim`.
pub fn multi_start(sim: &SimConfig, rep: u64, prior: &PriorSpec, starts: usize, em: &EmConfig) -> Result<MultiStart> {
    let data = generate_replicate(sim, rep)?;
    let inputs = data.inputs_for(prior)?;
    let tree = prior.kind.is_tree_space().then_some(&data.tree);
    let fits: Vec<FitResult> = (0..starts as u64)
        .into_par_iter()
        .map(|k| {
            let cfg = EmConfig {
                seed: sim.seed,
                init_index: k,
                ..*em
            };
            fit(&inputs, prior, tree, &cfg)
        })
        .collect::<Result<_>>()?;
    let betas: Vec<Vec<f64>> = fits.iter().map(|f| f.beta_hat.clone()).collect();
    let gammas: Vec<Vec<f64>> = fits.iter().map(|f| f.state.gamma.clone()).collect();
    Ok(MultiStart {
        beta_distances: pairwise_distances(&betas),
        gamma_distances: pairwise_distances(&gammas),
        fits,
    })
}

/// Median of a sample (mean of the two central values for even sizes).
pub fn median(v: &[f64]) -> f64 {
    assert!(!v.is_empty(), "median of an empty sample");
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn listed_signals() {
        let c = Scenario::C.beta_star();
        assert_eq!(c.iter().filter(|v| **v != 0.0).count(), 16);
        let d = Scenario::D.beta_star();
        assert_eq!(&d[..8], &[1., 1., 0., 0., -1., -1., -1., -1.]);
        assert!(d[8..16].iter().all(|v| *v == 0.0) && d[16..].iter().all(|v| *v == 1.0));
        for s in Scenario::ALL {
            assert_eq!(s.beta_star().len(), 32);
        }
    }

    #[test]
    fn selection_examples() {
        let star = [1.0, 0.0, 1.0, 0.0];
        assert_eq!(f1_selection(&star, &star, 0.005), 1.0);
        assert_eq!(f1_selection(&[0.0; 4], &star, 0.005), 0.0);
        assert!((f1_selection(&[1.0; 4], &star, 0.005) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rmse_examples() {
        let s = Scenario::A.beta_star();
        assert_eq!(rmse(&s, &s).unwrap(), 0.0);
        assert_eq!(rmse(&[0.0; 32], &s).unwrap(), 1.0);
        let twice: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
        assert!((rmse(&twice, &s).unwrap() - 1.0).abs() < 1e-15);
        assert!(rmse(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn fusion_perfect_and_constant() {
        let tree = PartitionTree::canonical(5).unwrap();
        let s = Scenario::C.beta_star();
        assert_eq!(f1_fusion(&s, &s, &tree, 0.005), 1.0);
        // constant estimate: every node predicted fused
        let truth_pos = tree
            .internal_nodes()
            .filter(|n| spread(&s[tree.descendant_range(*n)]) == 0.0)
            .count();
        let p = truth_pos as f64 / 31.0;
        let expect = 2.0 * p / (p + 1.0);
        assert!((f1_fusion(&[0.3; 32], &s, &tree, 0.005) - expect).abs() < 1e-15);
    }

    #[test]
    fn generation_is_seeded() {
        let cfg = SimConfig::new(Scenario::B, 10, 4, 1);
        let a = generate_replicate(&cfg, 0).unwrap();
        let b = generate_replicate(&cfg, 0).unwrap();
        let c = generate_replicate(&cfg, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.x, c.x);
        assert_eq!(a.effects.b[0], 0.0);
        assert_eq!(a.effects.c[0], 0.0);
    }

    #[test]
    fn synthetic_corpus_is_valid() {
        let d = synthetic_corpus(500, 16, 2).unwrap();
        d.validate().unwrap();
        assert_eq!(d.pos.len(), 500);
        assert!(d.replicates.iter().all(|r| !r.po_indices.is_empty()));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
