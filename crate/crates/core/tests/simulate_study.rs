use rand_distr::{Distribution, Gamma, Poisson};
use spinlets::em::EmConfig;
use spinlets::priors::PriorSpec;
use spinlets::rng::{stream_rng, Stream};
use spinlets::simulate::{median, multi_start, run_study, write_study_csv, Scenario, SimConfig};

#[test]
fn generator_moments() {
    let mut rng = stream_rng(9, Stream::SimulationData, 0);
    let g = Gamma::new(2.0, 1.0).unwrap();
    let p = Poisson::new(0.5).unwrap();
    let n = 100_000;
    let mt: f64 = (0..n).map(|_| g.sample(&mut rng)).sum::<f64>() / n as f64;
    let my: f64 = (0..n).map(|_| p.sample(&mut rng)).sum::<f64>() / n as f64;
    assert!((mt - 2.0).abs() < 0.02 * 2.0, "{mt}");
    assert!((my - 0.5).abs() < 0.02 * 0.5, "{my}");
}

#[test]
fn generated_data_has_expected_moments() {
    let sim = SimConfig::new(Scenario::A, 20_000, 4, 1);
    let d = spinlets::simulate::generate_replicate(&sim, 0).unwrap();
    let mt = d.t.iter().sum::<f64>() / d.t.len() as f64;
    let my = d.y.iter().sum::<f64>() / d.y.len() as f64;
    assert!((mt - 2.0).abs() < 0.04 && (my - 0.5).abs() < 0.01, "{mt} {my}");
}

fn priors(names: &[&str]) -> Vec<(String, PriorSpec)> {
    names.iter().map(|n| (n.to_string(), PriorSpec::named(n).unwrap())).collect()
}

#[test]
fn study_rows_are_ordered_and_reproducible() {
    let cfgs = [SimConfig::new(Scenario::C, 25, 1, 2), SimConfig::new(Scenario::A, 25, 1, 1)];
    let em = EmConfig {
        max_em_iters: 5,
        ..EmConfig::default()
    };
    let a = run_study(&cfgs, &priors(&["gdp0", "fgdp2"]), &em).unwrap();
    let b = run_study(&cfgs, &priors(&["gdp0", "fgdp2"]), &em).unwrap();
    let key = |o: &spinlets::simulate::StudyOutput| {
        o.rows
            .iter()
            .map(|r| (r.config, r.rep, r.prior.clone(), r.rmse, r.f1_fusion, r.em_iters))
            .collect::<Vec<_>>()
    };
    assert_eq!(key(&a), key(&b));
    assert_eq!(a.rows.len(), 6);
    assert_eq!(a.rows[0].config, Scenario::C);
    assert_eq!((a.rows[1].rep, a.rows[1].prior.as_str()), (0, "fgdp2"));
    let mut buf = Vec::new();
    write_study_csv(&a.rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 7);
}

#[test]
fn failed_fits_are_recorded_not_fatal() {
    let cfgs = [SimConfig::new(Scenario::B, 25, 1, 2)];
    let em = EmConfig {
        init_scale: -1.0,
        ..EmConfig::default()
    };
    let out = run_study(&cfgs, &priors(&["gdp"]), &em).unwrap();
    assert!(out.rows.is_empty());
    assert_eq!(out.failures.len(), 2);
}

#[test]
fn regression_target_on_blocks() {
    let cfgs: Vec<SimConfig> = (1..=5).map(|s| SimConfig::new(Scenario::C, 200, s, 1)).collect();
    let out = run_study(&cfgs, &priors(&["fgdp2"]), &EmConfig::default()).unwrap();
    let rmse: Vec<f64> = out.rows.iter().map(|r| r.rmse).collect();
    assert!(median(&rmse) <= 0.3, "{rmse:?}");
}

#[test]
fn multi_start_pairs() {
    let sim = SimConfig::new(Scenario::D, 25, 1, 1);
    let em = EmConfig {
        max_em_iters: 3,
        ..EmConfig::default()
    };
    let ms = multi_start(&sim, 0, &PriorSpec::named("fgdp2").unwrap(), 20, &em).unwrap();
    assert_eq!(ms.beta_distances.len(), 190);
    assert_eq!(ms.gamma_distances.len(), 190);
    assert!(ms.gamma_distances.iter().all(|d| *d > 0.0));
}
