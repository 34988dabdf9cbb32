//! `spinlets` command-line front end.
//!
//! Exit status: 0 on success, 2 on argument errors, 1 on runtime errors.
//! Every run writes `manifest.json` into `--out-dir`.

mod config;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use spinlets::bench::{run_acceptance_with, BenchOptions};
use spinlets::em::{fit, EmConfig, FitResult};
use spinlets::ingest::{self, SpinDataset, Task};
use spinlets::knn::{self, Bandwidth};
use spinlets::model::{Design, ModelInputs};
use spinlets::partition::recursive_bisect;
use spinlets::priors::PriorSpec;
use spinlets::reduction::{extract_reduction, group_geometry, render_svg, score_replicates, write_hull_csv};
use spinlets::simulate::{self, Scenario, SimConfig};
use spinlets::tree::PartitionTree;

#[derive(Debug, Parser, Serialize)]
#[command(name = "spinlets", version, about = "Supervised multiscale dimension reduction for spatial interaction networks")]
struct Cli {
    /// Seed for every random stream.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for outputs and the manifest.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// `key=value` file of flag defaults.
    #[arg(long, global = true)]
    config_file: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand, Serialize)]
enum Cmd {
    /// Assemble a replicate dataset (generic CSV or event JSON).
    Ingest(IngestArgs),
    /// Build the k-NN similarity graph and the partition tree.
    Partition(PartitionArgs),
    /// Fit the mixed model by variational EM.
    Fit(FitArgs),
    /// Extract the reduced representation and SDR scores.
    Reduce(ReduceArgs),
    /// Run the simulation study.
    Simulate(SimulateArgs),
    /// Draw group geometry on the pitch.
    ExportSvg(ExportArgs),
    /// Acceptance suite.
    Bench {
        #[command(subcommand)]
        action: BenchCmd,
    },
}

#[derive(Debug, Subcommand, Serialize)]
enum BenchCmd {
    /// Run every acceptance criterion.
    Run {
        /// 50 study replications instead of 10.
        #[arg(long)]
        full: bool,
    },
}

#[derive(Debug, Args, Serialize)]
struct IngestArgs {
    /// Generic replicate CSV to validate and normalize.
    #[arg(long, conflicts_with_all = ["matches", "events_dir"])]
    csv: Option<PathBuf>,
    /// Match listing (JSON).
    #[arg(long, requires = "events_dir")]
    matches: Option<PathBuf>,
    /// Directory of per-match event files `<match_id>.json`.
    #[arg(long, requires = "matches")]
    events_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TaskArg::GoalDifference)]
    task: TaskArg,
    #[arg(long, default_value_t = 70)]
    phase_cut: u32,
    #[arg(long, default_value = "dataset.csv")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum, Serialize)]
enum TaskArg {
    GoalDifference,
    GamePhase,
}

#[derive(Debug, Args, Serialize)]
struct PartitionArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    height: u32,
    /// Neighbourhood size (default `min(1500, Q-1)`).
    #[arg(long)]
    knn: Option<usize>,
    /// `median` or a positive kernel bandwidth.
    #[arg(long, default_value = "median")]
    bandwidth: String,
    #[arg(long, default_value_t = spinlets::partition::DEFAULT_BALANCE_TOL)]
    balance: f64,
    /// Also write the graph as a `u v w` edge list.
    #[arg(long)]
    edges: Option<PathBuf>,
    #[arg(long, default_value = "tree.json")]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct PriorArgs {
    /// Named prior variant, e.g. `fgdp2`.
    #[arg(long, conflicts_with = "prior_params")]
    prior: Option<String>,
    /// Explicit `kind,a1,e1,a2,e2[,theta]`.
    #[arg(long)]
    prior_params: Option<String>,
}

#[derive(Debug, Args, Serialize)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    tree: PathBuf,
    #[command(flatten)]
    prior: PriorArgs,
    #[arg(long, default_value_t = 50)]
    max_em_iters: usize,
    /// Index of the random initialization.
    #[arg(long, default_value_t = 0)]
    init_index: u64,
    #[arg(long, default_value = "model.json")]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ReduceArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0.005)]
    threshold: f64,
    /// Dataset to score (writes `scores.csv`).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "reduction.json")]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct SimulateArgs {
    /// Configurations, comma-separated (a, b, c, d).
    #[arg(long, default_value = "a,b,c,d")]
    config: String,
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Named prior; repeat for several.
    #[arg(long)]
    prior: Vec<String>,
    /// Explicit prior parameters; repeat for several.
    #[arg(long)]
    prior_params: Vec<String>,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    /// Also refit the first replication from this many random starts.
    #[arg(long)]
    starts: Option<usize>,
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.005)]
    threshold: f64,
    /// One figure per replicate besides the aggregate.
    #[arg(long)]
    per_replicate: bool,
    /// File-name prefix.
    #[arg(long, default_value = "groups")]
    prefix: String,
}

/// Fitted model as stored on disk.
#[derive(Debug, Serialize, serde::Deserialize)]
struct ModelFile {
    version: String,
    prior: PriorSpec,
    tree: PartitionTree,
    fit: FitResult,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    fn usage(e: impl std::fmt::Display) -> Self {
        CliError::Usage(e.to_string())
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'static str,
    command: &'a str,
    seed: u64,
    threads: usize,
    flags: &'a Cli,
    config_file: Option<BTreeMap<String, String>>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

struct Run {
    out_dir: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl Run {
    fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.insert(path.display().to_string(), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    fn output(&mut self, name: &Path) -> PathBuf {
        let p = if name.is_absolute() { name.to_path_buf() } else { self.out_dir.join(name) };
        self.outputs.push(p.display().to_string());
        p
    }

    fn create(&mut self, name: &Path) -> anyhow::Result<BufWriter<File>> {
        let p = self.output(name);
        Ok(BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?))
    }
}

fn write_json<T: Serialize>(w: &mut impl Write, v: &T) -> anyhow::Result<()> {
    serde_json::to_writer_pretty(&mut *w, v)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn load_dataset(run: &mut Run, path: &Path) -> anyhow::Result<SpinDataset> {
    run.input(path)?;
    Ok(ingest::parse_spin_csv(path)?)
}

fn load_json<T: serde::de::DeserializeOwned>(run: &mut Run, path: &Path) -> anyhow::Result<T> {
    run.input(path)?;
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn resolve_prior(p: &PriorArgs) -> Result<PriorSpec, CliError> {
    match (&p.prior, &p.prior_params) {
        (Some(name), None) => name.parse().map_err(CliError::usage),
        (None, Some(params)) => PriorSpec::from_params(params).map_err(CliError::usage),
        _ => Err(CliError::Usage("give --prior or --prior-params".into())),
    }
}

/// Model inputs in the coefficient space of `prior`.
fn model_inputs(ds: &SpinDataset, tree: &PartitionTree, prior: &PriorSpec) -> anyhow::Result<ModelInputs> {
    let counts = tree.aggregate_counts(ds)?;
    let design = if prior.kind.is_tree_space() {
        Design::Tree(tree.design_matrix())
    } else {
        Design::Identity(tree.num_leaves())
    };
    Ok(ModelInputs::from_counts(&counts, ds.responses(), ds.exposures(), design)?)
}

fn cmd_ingest(run: &mut Run, a: &IngestArgs) -> Result<(), CliError> {
    let ds = match (&a.csv, &a.matches, &a.events_dir) {
        (Some(csv), _, _) => load_dataset(run, csv)?,
        (None, Some(m), Some(dir)) => {
            run.input(m)?;
            let matches = ingest::load_matches(m, dir).map_err(anyhow::Error::from)?;
            let task = match a.task {
                TaskArg::GoalDifference => Task::GoalDifference,
                TaskArg::GamePhase => Task::GamePhase,
            };
            if a.phase_cut == 0 || a.phase_cut >= 120 {
                return Err(CliError::Usage(format!("--phase-cut must lie in (0, 120), got {}", a.phase_cut)));
            }
            ingest::build_task_replicates(&matches, task, a.phase_cut).map_err(anyhow::Error::from)?
        }
        _ => return Err(CliError::Usage("give --csv, or --matches with --events-dir".into())),
    };
    let out = run.output(&a.out);
    ingest::write_spin_csv(&ds, &out).map_err(anyhow::Error::from)?;
    log::info!("{} replicates, {} primitive objects", ds.replicates.len(), ds.pos.len());
    Ok(())
}

fn cmd_partition(run: &mut Run, a: &PartitionArgs, seed: u64) -> Result<(), CliError> {
    let bandwidth: Bandwidth = a.bandwidth.parse().map_err(CliError::Usage)?;
    if !(a.balance >= 1.0) {
        return Err(CliError::Usage(format!("--balance must be >= 1, got {}", a.balance)));
    }
    let ds = load_dataset(run, &a.data)?;
    let points = ds.points();
    let k = a.knn.unwrap_or_else(|| knn::default_k(points.len()));
    let graph = {
        let nb = knn::knn_search(&points, k).map_err(anyhow::Error::from)?;
        knn::build_similarity_graph(&nb, bandwidth)
    };
    if let Some(path) = &a.edges {
        let mut w = run.create(path)?;
        graph.write_edge_list(&mut w).context("writing edge list")?;
        w.flush().context("writing edge list")?;
    }
    let tree = recursive_bisect(&graph, a.height, seed, a.balance).map_err(anyhow::Error::from)?;
    write_json(&mut run.create(&a.out)?, &tree)?;
    Ok(())
}

fn cmd_fit(run: &mut Run, a: &FitArgs, seed: u64) -> Result<(), CliError> {
    let prior = resolve_prior(&a.prior)?;
    let em = EmConfig {
        max_em_iters: a.max_em_iters,
        seed,
        init_index: a.init_index,
        ..EmConfig::default()
    };
    em.validate().map_err(CliError::usage)?;
    let ds = load_dataset(run, &a.data)?;
    let tree: PartitionTree = load_json(run, &a.tree)?;
    let inputs = model_inputs(&ds, &tree, &prior)?;
    let res = fit(&inputs, &prior, prior.kind.is_tree_space().then_some(&tree), &em).map_err(anyhow::Error::from)?;
    log::info!("{} EM iterations, converged: {}", res.iterations, res.converged);
    let model = ModelFile {
        version: env!("CARGO_PKG_VERSION").into(),
        prior,
        tree,
        fit: res,
    };
    write_json(&mut run.create(&a.out)?, &model)?;
    Ok(())
}

fn cmd_reduce(run: &mut Run, a: &ReduceArgs) -> Result<(), CliError> {
    if !(a.threshold >= 0.0) {
        return Err(CliError::Usage("--threshold must be non-negative".into()));
    }
    let model: ModelFile = load_json(run, &a.model)?;
    let red = extract_reduction(&model.fit.beta_hat, &model.tree, a.threshold).map_err(anyhow::Error::from)?;
    write_json(&mut run.create(&a.out)?, &red)?;
    if let Some(data) = &a.data {
        let ds = load_dataset(run, data)?;
        let counts = model.tree.aggregate_counts(&ds).map_err(anyhow::Error::from)?;
        let scores = score_replicates(&counts, &model.fit.beta_hat).map_err(anyhow::Error::from)?;
        let mut w = csv::Writer::from_writer(run.create(Path::new("scores.csv"))?);
        w.write_record(["replicate_id", "response", "score"]).context("writing scores")?;
        for (r, s) in ds.replicates.iter().zip(&scores) {
            w.write_record([r.id.clone(), r.response.to_string(), s.to_string()])
                .context("writing scores")?;
        }
        w.flush().context("writing scores")?;
    }
    Ok(())
}

fn cmd_simulate(run: &mut Run, a: &SimulateArgs, seed: u64) -> Result<(), CliError> {
    let scenarios: Vec<Scenario> = a
        .config
        .split(',')
        .map(|s| s.parse::<Scenario>().map_err(CliError::usage))
        .collect::<Result<_, _>>()?;
    let mut priors = Vec::new();
    for name in &a.prior {
        priors.push((name.clone(), name.parse::<PriorSpec>().map_err(CliError::usage)?));
    }
    for params in &a.prior_params {
        priors.push((params.clone(), PriorSpec::from_params(params).map_err(CliError::usage)?));
    }
    if priors.is_empty() {
        return Err(CliError::Usage("give at least one --prior or --prior-params".into()));
    }
    if a.n < 2 || a.reps == 0 {
        return Err(CliError::Usage("--n must be >= 2 and --reps >= 1".into()));
    }
    let configs: Vec<SimConfig> = scenarios.iter().map(|&s| SimConfig::new(s, a.n, seed, a.reps)).collect();
    let em = EmConfig::default();
    let out = simulate::run_study(&configs, &priors, &em).map_err(anyhow::Error::from)?;
    for f in &out.failures {
        log::warn!("fit failed: config {} prior {} rep {}: {}", f.config, f.prior, f.rep, f.error);
    }
    simulate::write_study_csv(&out.rows, run.create(&a.out)?).map_err(anyhow::Error::from)?;
    if let Some(starts) = a.starts {
        let mut w = csv::Writer::from_writer(run.create(Path::new("multistart.csv"))?);
        w.write_record(["config", "prior", "pair", "beta_distance", "gamma_distance"])
            .context("writing multi-start")?;
        for sim in &configs {
            for (name, prior) in &priors {
                let ms = simulate::multi_start(sim, 0, prior, starts, &em).map_err(anyhow::Error::from)?;
                for (p, (b, g)) in ms.beta_distances.iter().zip(&ms.gamma_distances).enumerate() {
                    w.write_record([sim.config.to_string(), name.clone(), p.to_string(), b.to_string(), g.to_string()])
                        .context("writing multi-start")?;
                }
            }
        }
        w.flush().context("writing multi-start")?;
    }
    Ok(())
}

fn cmd_export(run: &mut Run, a: &ExportArgs) -> Result<(), CliError> {
    let model: ModelFile = load_json(run, &a.model)?;
    let ds = load_dataset(run, &a.data)?;
    let red = extract_reduction(&model.fit.beta_hat, &model.tree, a.threshold).map_err(CliError::usage)?;
    let mut views: Vec<(String, Option<usize>)> = vec![("aggregate".into(), None)];
    if a.per_replicate {
        views.extend((0..ds.replicates.len()).map(|i| (format!("replicate_{i}"), Some(i))));
    }
    for (name, rep) in views {
        let geo = group_geometry(&red, &ds, &model.tree, rep).map_err(anyhow::Error::from)?;
        let title = match rep {
            Some(i) => format!("{} ({})", ds.replicates[i].id, ds.label),
            None => format!("{} (all replicates)", ds.label),
        };
        let mut w = run.create(Path::new(&format!("{}_{name}.svg", a.prefix)))?;
        w.write_all(render_svg(&geo, &title).as_bytes()).context("writing svg")?;
        w.flush().context("writing svg")?;
        write_hull_csv(&geo, run.create(Path::new(&format!("{}_{name}_hulls.csv", a.prefix)))?).map_err(anyhow::Error::from)?;
    }
    Ok(())
}

fn cmd_bench(run: &mut Run, full: bool, seed: u64) -> Result<(), CliError> {
    let opts = BenchOptions {
        seed,
        ..if full { BenchOptions::full() } else { BenchOptions::default() }
    };
    let report = run_acceptance_with(&opts);
    let mut w = run.create(Path::new("bench_report.json"))?;
    w.write_all(report.to_json().as_bytes()).context("writing report")?;
    w.flush().context("writing report")?;
    let table = report.render_table();
    std::fs::write(run.output(Path::new("bench_report.txt")), &table).context("writing report")?;
    print!("{table}");
    if !report.all_passed() {
        return Err(anyhow::anyhow!("{} of {} criteria failed", report.total - report.passed, report.total).into());
    }
    Ok(())
}

/// Position of the (innermost) subcommand token in `argv`, skipping the
/// values of global options.
fn subcommand_end(argv: &[String], names: &[&str]) -> Option<usize> {
    let with_value = ["--seed", "--threads", "--out-dir", "--config-file"];
    let mut i = 1;
    let mut want = 0;
    while i < argv.len() {
        let a = argv[i].as_str();
        if with_value.contains(&a) {
            i += 2;
            continue;
        }
        if a == names[want] {
            want += 1;
            if want == names.len() {
                return Some(i);
            }
        }
        i += 1;
    }
    None
}

/// Parses `argv`, splicing in the config-file flags when one is given.
fn parse_args(argv: Vec<String>) -> Result<(Cli, Option<BTreeMap<String, String>>), clap::Error> {
    let first = Cli::try_parse_from(&argv)?;
    let Some(path) = first.config_file.clone() else {
        return Ok((first, None));
    };
    let entries = config::read(&path).map_err(|e| clap::Error::raw(clap::error::ErrorKind::InvalidValue, format!("{e}\n")))?;
    let root = Cli::command();
    let top = root.find_subcommand(cmd_name(&first.command)).expect("known subcommand");
    let mut path_names = vec![top.get_name().to_string()];
    let mut cmd = top;
    if let Cmd::Bench { .. } = first.command {
        cmd = top.find_subcommand("run").expect("bench run");
        path_names.push("run".into());
    }
    let flags = config::to_flags(&entries, &root, cmd).map_err(|e| clap::Error::raw(clap::error::ErrorKind::UnknownArgument, format!("{e}\n")))?;
    let names: Vec<&str> = path_names.iter().map(String::as_str).collect();
    let at = subcommand_end(&argv, &names).expect("subcommand present");
    let mut merged: Vec<String> = argv[..=at].to_vec();
    merged.extend(flags);
    merged.extend(argv[at + 1..].iter().cloned());
    let matches = Cli::command().args_override_self(true).try_get_matches_from(merged)?;
    let cli = Cli::from_arg_matches(&matches)?;
    Ok((cli, Some(entries)))
}

fn cmd_name(c: &Cmd) -> &'static str {
    match c {
        Cmd::Ingest(_) => "ingest",
        Cmd::Partition(_) => "partition",
        Cmd::Fit(_) => "fit",
        Cmd::Reduce(_) => "reduce",
        Cmd::Simulate(_) => "simulate",
        Cmd::ExportSvg(_) => "export-svg",
        Cmd::Bench { .. } => "bench",
    }
}

fn execute(cli: &Cli, file: Option<BTreeMap<String, String>>) -> Result<(), CliError> {
    if cli.threads == Some(0) {
        return Err(CliError::Usage("--threads must be positive".into()));
    }
    let threads = cli.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("configuring the thread pool")?;
    std::fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let mut run = Run {
        out_dir: cli.out_dir.clone(),
        inputs: BTreeMap::new(),
        outputs: Vec::new(),
    };
    if let Some(p) = &cli.config_file {
        run.input(p)?;
    }
    let result = match &cli.command {
        Cmd::Ingest(a) => cmd_ingest(&mut run, a),
        Cmd::Partition(a) => cmd_partition(&mut run, a, cli.seed),
        Cmd::Fit(a) => cmd_fit(&mut run, a, cli.seed),
        Cmd::Reduce(a) => cmd_reduce(&mut run, a),
        Cmd::Simulate(a) => cmd_simulate(&mut run, a, cli.seed),
        Cmd::ExportSvg(a) => cmd_export(&mut run, a),
        Cmd::Bench {
            action: BenchCmd::Run { full },
        } => cmd_bench(&mut run, *full, cli.seed),
    };
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        command: cmd_name(&cli.command),
        seed: cli.seed,
        threads,
        flags: cli,
        config_file: file,
        inputs: std::mem::take(&mut run.inputs),
        outputs: std::mem::take(&mut run.outputs),
    };
    let path = cli.out_dir.join("manifest.json");
    let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    write_json(&mut w, &manifest)?;
    result
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (cli, file) = match parse_args(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match execute(&cli, file) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
