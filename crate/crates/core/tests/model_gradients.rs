use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spinlets::model::{curvature, objective, Design, FitState, Layout, ModelInputs};
use spinlets::priors::{assemble_precision, estep_weights, PriorSpec};
use spinlets::tree::PartitionTree;

fn random_instance(rng: &mut ChaCha8Rng, tree_space: bool) -> (ModelInputs, FitState, spinlets::priors::Precision) {
    let h = rng.random_range(1..=3u32);
    let m = 1usize << h;
    let n = rng.random_range(2..=8usize);
    let x: Vec<f64> = (0..n * m).map(|_| rng.random_range(0..6) as f64).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..3) as f64).collect();
    let t: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..3.0)).collect();
    let tree = PartitionTree::canonical(h).unwrap();
    let (design, prior) = if tree_space {
        (Design::Tree(tree.design_matrix()), PriorSpec::named("fgdp1").unwrap())
    } else {
        (Design::Identity(m), PriorSpec::named("flsa").unwrap())
    };
    let inputs = ModelInputs::new(x, y, t, design).unwrap();
    let mut s = FitState::initial(&inputs);
    let layout = Layout::of(&inputs);
    let v: Vec<f64> = (0..layout.len()).map(|_| rng.random_range(-0.5..0.5)).collect();
    s.unpack(layout, &v);
    s.omega = [rng.random_range(0.2..2.0), rng.random_range(0.2..2.0), rng.random_range(0.2..2.0)];
    let w = estep_weights(&s.gamma, &prior, Some(&tree)).unwrap();
    (inputs, s, assemble_precision(&w).unwrap())
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..40 {
        let (inp, s, lam) = random_instance(&mut rng, case % 2 == 0);
        let layout = Layout::of(&inp);
        let (_, g) = objective(&inp, &s, &lam, true).unwrap();
        let g = g.unwrap();
        let base = s.pack();
        for p in 0..layout.len() {
            let h = 1e-6 * base[p].abs().max(1.0);
            let mut sp = s.clone();
            let mut v = base.clone();
            v[p] += h;
            sp.unpack(layout, &v);
            let fp = objective(&inp, &sp, &lam, false).unwrap().0;
            v[p] -= 2.0 * h;
            sp.unpack(layout, &v);
            let fm = objective(&inp, &sp, &lam, false).unwrap().0;
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - g[p]).abs() / g[p].abs().max(1.0);
            assert!(err < 1e-5, "case {case} coord {p}: fd {fd} vs {}", g[p]);
        }
    }
}

#[test]
fn curvature_matches_gradient_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..10 {
        let (inp, s, lam) = random_instance(&mut rng, case % 2 == 1);
        let layout = Layout::of(&inp);
        let c = curvature(&inp, &s, &lam).unwrap();
        let dim = layout.k_a();
        let base = s.pack();
        let grad = |v: &[f64]| {
            let mut sp = s.clone();
            sp.unpack(layout, v);
            objective(&inp, &sp, &lam, true).unwrap().1.unwrap()
        };
        for p in 0..dim {
            let h = 1e-5;
            let mut v = base.clone();
            v[p] += h;
            let gp = grad(&v);
            v[p] -= 2.0 * h;
            let gm = grad(&v);
            for q in 0..dim {
                let fd = -(gp[q] - gm[q]) / (2.0 * h);
                assert!((fd - c.dense[(q, p)]).abs() < 1e-5 * fd.abs().max(1.0), "case {case} ({q},{p}): {fd} vs {}", c.dense[(q, p)]);
            }
        }
    }
}
