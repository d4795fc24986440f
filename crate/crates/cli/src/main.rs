use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dynopf_core::acopf::{build_dataset, solve_reference, static_violations, DispatchPoint, OpfDataset};
use dynopf_core::config::RunConfig;
use dynopf_core::dynamics::{scenario, simulate, stability_check, IntegratorConfig, Method};
use dynopf_core::dynopf::{node_path, train, LtoProxy, Mode};
use dynopf_core::eval::{bench_inference, evaluate_model, timing_table};
use dynopf_core::grid::{load_case, Network};
use dynopf_core::node::{
    bench_node_vs_solver, fit_normalization, node_error, sample_node_dataset, train_node, NodeDataset, NodeInput,
    NodeSurrogate, SplitTag,
};
use dynopf_neural::Checkpoint;

const OPF_STEM: &str = "opf";
const FAILED_MARKER: &str = "FAILED";

/// Stability-constrained AC-OPF learning toolkit.
#[derive(Parser)]
#[command(name = "dynopf", version)]
struct Cli {
    /// Worker threads for parallel sections (defaults to all cores).
    #[arg(long, global = true, env = "DYNOPF_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Case file utilities.
    Case {
        #[command(subcommand)]
        action: CaseAction,
    },
    /// Solve perturbed-load OPF instances into a dataset.
    GenData(GenData),
    /// Sample single-machine trajectories for one generator.
    GenNodeData(GenNodeData),
    /// Pretrain one generator's surrogate.
    TrainNode(TrainNodeArgs),
    /// Train an optimization proxy.
    Train(TrainArgs),
    /// Evaluate a trained run on its test split.
    Evaluate(RunDirArgs),
    /// Integrate one generator's swing equation at a dispatch point.
    Simulate(SimulateArgs),
    /// Time surrogate and proxy inference of a trained run.
    Bench(BenchArgs),
}

#[derive(Subcommand)]
enum CaseAction {
    /// Parse a case and report its invariants.
    Validate { file: String },
}

#[derive(Args)]
struct Common {
    /// Base configuration file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn base(&self) -> Result<RunConfig> {
        Ok(match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::default(),
        })
    }
}

#[derive(Args)]
struct GenData {
    case: String,
    #[arg(long)]
    n: Option<usize>,
    /// Relative load perturbation half-width.
    #[arg(long)]
    perturb: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct GenNodeData {
    case: String,
    /// Generator index (0-based).
    #[arg(long)]
    gen: usize,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainNodeArgs {
    case: String,
    #[arg(long)]
    gen: usize,
    /// Directory written by `gen-node-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    case: String,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Directory with one surrogate checkpoint per generator.
    #[arg(long)]
    node_ckpts: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    lambda0: Option<f64>,
    /// Angle head-room used by the training stability penalty (rad).
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    freeze_node: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct RunDirArgs {
    run_dir: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    run_dir: PathBuf,
    /// Passes over the test split.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
}

#[derive(Args)]
struct SimulateArgs {
    case: String,
    #[arg(long)]
    gen: usize,
    /// JSON dispatch point; defaults to the reference optimum at nominal load.
    #[arg(long)]
    dispatch_file: Option<PathBuf>,
    #[arg(long, default_value = "dopri5")]
    method: Method,
    #[arg(long, default_value_t = 3.0)]
    horizon: f64,
    /// Fixed step for euler/rk4 and the initial step for adaptive methods.
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    /// Fault duration before the trajectory starts (0 keeps the steady state).
    #[arg(long, default_value_t = 0.0)]
    clearing_time: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: dynopf_core::CoreError| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let out = output_dir(&cli.command);
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(dir) = out {
                if dir.is_dir() {
                    let _ = std::fs::write(dir.join(FAILED_MARKER), format!("{e:#}\n"));
                }
            }
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn output_dir(c: &Command) -> Option<PathBuf> {
    match c {
        Command::Case { .. } => None,
        Command::GenData(a) => Some(a.common.out.clone()),
        Command::GenNodeData(a) => Some(a.common.out.clone()),
        Command::TrainNode(a) => Some(a.common.out.clone()),
        Command::Train(a) => Some(a.common.out.clone()),
        Command::Evaluate(a) => Some(a.run_dir.clone()),
        Command::Bench(a) => Some(a.run_dir.clone()),
        Command::Simulate(a) => Some(a.out.clone()),
    }
}

fn run(c: Command) -> Result<()> {
    match c {
        Command::Case { action: CaseAction::Validate { file } } => validate_case(&file),
        Command::GenData(a) => gen_data(a),
        Command::GenNodeData(a) => gen_node_data(a),
        Command::TrainNode(a) => train_node_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(&a.run_dir),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Bench(a) => bench_cmd(&a.run_dir, a.repeats),
    }
}

fn write_snapshot(dir: &Path, cfg: &RunConfig) -> Result<()> {
    cfg.save_snapshot(dir)?;
    std::fs::write(dir.join("VERSION"), format!("{} {}\n", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")))?;
    let _ = std::fs::remove_file(dir.join(FAILED_MARKER));
    Ok(())
}

fn case(name: &str) -> Result<Network> {
    load_case(name).with_context(|| format!("loading case `{name}`"))
}

fn validate_case(file: &str) -> Result<()> {
    let net = case(file)?;
    println!("buses {} lines {} generators {}", net.n_bus(), net.n_line(), net.n_gen());
    println!("reference bus {} base power {}", net.reference_bus, net.base_power);
    println!("hash {}", net.content_hash());
    let load = net.nominal_load();
    let d: f64 = load.p_d.iter().sum();
    let cap: f64 = net.generators.iter().map(|g| g.p_max).sum();
    println!("nominal demand {d:.4} pu, capacity {cap:.4} pu");
    if d > cap {
        bail!("nominal demand exceeds generation capacity");
    }
    println!("ok");
    Ok(())
}

fn gen_data(a: GenData) -> Result<()> {
    let mut cfg = a.common.base()?;
    cfg.case = a.case;
    cfg.samples = a.n.unwrap_or(cfg.samples);
    cfg.perturb = a.perturb.unwrap_or(cfg.perturb);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.output = a.common.out.clone();
    let net = case(&cfg.case)?;
    std::fs::create_dir_all(&cfg.output)?;
    let ds = build_dataset(&net, cfg.samples, cfg.perturb, cfg.seed, &cfg.solver)?;
    ds.save(&net, &cfg.output, OPF_STEM)?;
    write_snapshot(&cfg.output, &cfg)?;
    println!("{} samples ({} draws) -> {}", ds.samples.len(), ds.manifest.attempts, cfg.output.display());
    Ok(())
}

fn node_stem(g: usize) -> String {
    format!("node_data_g{g}")
}

fn gen_node_data(a: GenNodeData) -> Result<()> {
    let mut cfg = a.common.base()?;
    cfg.case = a.case;
    cfg.node_samples = a.n.unwrap_or(cfg.node_samples);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.output = a.common.out.clone();
    let net = case(&cfg.case)?;
    std::fs::create_dir_all(&cfg.output)?;
    let ds = sample_node_dataset(&net, a.gen, cfg.node_samples, cfg.seed, &cfg.dynamics)?;
    ds.save(&cfg.output, &node_stem(a.gen))?;
    write_snapshot(&cfg.output, &cfg)?;
    println!("{} trajectories for generator {} -> {}", ds.samples.len(), a.gen, cfg.output.display());
    Ok(())
}

fn train_node_cmd(a: TrainNodeArgs) -> Result<()> {
    let mut cfg = a.common.base()?;
    cfg.case = a.case;
    if let Some(e) = a.epochs {
        cfg.node_train.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.node_train.seed = s;
    }
    cfg.output = a.common.out.clone();
    let net = case(&cfg.case)?;
    if a.gen >= net.n_gen() {
        bail!("generator index {} out of range ({} generators)", a.gen, net.n_gen());
    }
    let ds = NodeDataset::load(&a.data, &node_stem(a.gen))?;
    if ds.manifest.net_hash != net.content_hash() {
        bail!("node dataset was generated for a different network");
    }
    std::fs::create_dir_all(&cfg.output)?;
    write_snapshot(&cfg.output, &cfg)?;
    let norm = fit_normalization(&ds, cfg.dynamics.delta_max);
    let mut s = NodeSurrogate::new(a.gen, norm, &cfg.node, cfg.node_train.seed)?;
    let report = train_node(&mut s, &ds, &cfg.node_train)?;
    s.save(&node_path(&cfg.output, a.gen))?;
    std::fs::write(cfg.output.join(format!("node_g{}_loss.csv", a.gen)), report.to_csv())?;
    let err = node_error(&s, &ds, SplitTag::Test)?;
    std::fs::write(cfg.output.join(format!("node_g{}_error.json", a.gen)), format!("{{\"test_error_pct\": {err:?}}}\n"))?;
    println!("generator {} held-out error {err:.3}%", a.gen);
    Ok(())
}

fn load_surrogates(dir: &Path, n: usize) -> Result<Vec<NodeSurrogate>> {
    (0..n)
        .map(|k| {
            let p = node_path(dir, k);
            NodeSurrogate::load(&p).with_context(|| format!("loading {}", p.display()))
        })
        .collect()
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = a.common.base()?;
    cfg.case = a.case;
    let t = &mut cfg.trainer;
    t.mode = a.mode.unwrap_or(t.mode);
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.rho = a.rho.unwrap_or(t.rho);
    t.lambda0 = a.lambda0.unwrap_or(t.lambda0);
    t.stability_margin = a.margin.unwrap_or(t.stability_margin);
    t.freeze_node |= a.freeze_node;
    t.seed = a.seed.unwrap_or(t.seed);
    t.dynamics = cfg.dynamics.clone();
    cfg.data_dir = Some(absolute(&a.data)?);
    cfg.node_dir = a.node_ckpts.as_deref().map(absolute).transpose()?;
    cfg.output = a.common.out.clone();
    let net = case(&cfg.case)?;
    let ds = OpfDataset::load(&net, &a.data, OPF_STEM)?;
    let surrogates = match (&cfg.node_dir, cfg.trainer.mode) {
        (Some(d), _) => load_surrogates(d, net.n_gen())?,
        (None, Mode::Dynopf) => bail!("dynopf mode needs --node-ckpts"),
        (None, _) => Vec::new(),
    };
    std::fs::create_dir_all(&cfg.output)?;
    write_snapshot(&cfg.output, &cfg)?;
    let out = train(&net, &ds, &surrogates, &cfg.trainer, Some(&cfg.output))?;
    let last = out.log.last().context("no epochs were run")?;
    println!(
        "epoch {}: val mse {:.3e}, val gap {:.3}%, val unstable {:.1}%",
        last.epoch, last.val_mse, last.val_gap_pct, last.val_unstable_pct
    );
    Ok(())
}

fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(std::path::absolute(p)?)
}

struct Run {
    cfg: RunConfig,
    net: Network,
    data: OpfDataset,
    proxy: LtoProxy,
    surrogates: Option<Vec<NodeSurrogate>>,
}

fn load_run(dir: &Path) -> Result<Run> {
    let cfg = RunConfig::load(&dir.join(dynopf_core::config::SNAPSHOT_FILE)).context("run directory has no config snapshot")?;
    let net = case(&cfg.case)?;
    let data_dir = cfg.data_dir.clone().context("run config names no dataset")?;
    let data = OpfDataset::load(&net, &data_dir, OPF_STEM)?;
    let proxy = LtoProxy::from_checkpoint(&Checkpoint::load(&dir.join("proxy.json"))?)?;
    let surrogates = if cfg.trainer.mode == Mode::Dynopf { Some(load_surrogates(dir, net.n_gen())?) } else { None };
    Ok(Run { cfg, net, data, proxy, surrogates })
}

fn evaluate_cmd(dir: &Path) -> Result<()> {
    let r = load_run(dir)?;
    let mut report = evaluate_model(&r.proxy, r.surrogates.as_deref(), &r.data, &r.net, &r.cfg.dynamics)?;
    report.config_hash = r.cfg.hash()?;
    std::fs::write(dir.join("report.json"), report.to_json()?)?;
    std::fs::write(dir.join("report.csv"), report.to_csv())?;
    std::fs::write(dir.join("trajectories.csv"), trajectories_csv(&r)?)?;
    println!("{}", report.to_json()?);
    Ok(())
}

/// True-field and surrogate rotor angles of every generator at the first
/// test prediction.
fn trajectories_csv(r: &Run) -> Result<String> {
    let s = r.data.subset(&r.data.split.test)[0];
    let d = r.proxy.predict(&r.net, &s.load)?;
    let grid = dynopf_core::dynamics::canonical_grid();
    let mut out = String::from("generator,t,delta_true,delta_surrogate\n");
    for (k, g) in r.net.generators.iter().enumerate() {
        let sc = scenario(g, d.p_r[k], d.q_r[k], d.v_mag[g.bus], d.v_ang[g.bus], &r.cfg.dynamics)?;
        let tr = simulate(&sc, &r.cfg.dynamics.integrator, &grid)?;
        let sur = match &r.surrogates {
            Some(ss) => Some(ss[k].rollout(&NodeInput::from_scenario(&sc))?),
            None => None,
        };
        for (i, t) in grid.iter().enumerate() {
            let sv = sur.as_ref().map_or(String::new(), |v| format!("{:?}", v[i].delta));
            out.push_str(&format!("{k},{t:?},{:?},{sv}\n", tr.states[i].delta));
        }
    }
    Ok(out)
}

fn simulate_cmd(a: SimulateArgs) -> Result<()> {
    let net = case(&a.case)?;
    if a.gen >= net.n_gen() {
        bail!("generator index {} out of range ({} generators)", a.gen, net.n_gen());
    }
    let d: DispatchPoint = match &a.dispatch_file {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).context("parsing dispatch file")?,
        None => solve_reference(&net, &net.nominal_load(), &Default::default())?.optimum,
    };
    d.check(&net)?;
    let mut cfg = RunConfig { case: a.case.clone(), output: a.out.clone(), ..Default::default() };
    cfg.dynamics.clearing_time = a.clearing_time;
    cfg.dynamics.integrator = IntegratorConfig { method: a.method, dt: a.dt, horizon: a.horizon, ..cfg.dynamics.integrator };
    cfg.dynamics.integrator.validate()?;
    let g = &net.generators[a.gen];
    let sc = scenario(g, d.p_r[a.gen], d.q_r[a.gen], d.v_mag[g.bus], d.v_ang[g.bus], &cfg.dynamics)?;
    let steps = (a.horizon / 0.1).round().max(1.0) as usize;
    let grid: Vec<f64> = (0..=steps).map(|k| a.horizon * k as f64 / steps as f64).collect();
    let tr = simulate(&sc, &cfg.dynamics.integrator, &grid)?;
    let verdict = stability_check(&tr, cfg.dynamics.delta_max)?;
    std::fs::create_dir_all(&a.out)?;
    write_snapshot(&a.out, &cfg)?;
    std::fs::write(a.out.join("dispatch.json"), serde_json::to_string_pretty(&d)?)?;
    std::fs::write(a.out.join("trajectory.csv"), tr.to_csv(Some((sc.params.v_mag, sc.params.v_ang))))?;
    let v = serde_json::json!({
        "generator": a.gen,
        "stable": verdict.stable,
        "margin": verdict.margin,
        "worst_violation": verdict.worst_violation,
        "static_max_equality": static_violations(&net, &d, &net.nominal_load())?.max_equality(),
    });
    std::fs::write(a.out.join("verdict.json"), serde_json::to_string_pretty(&v)?)?;
    println!("{}", if verdict.stable { "stable" } else { "unstable" });
    Ok(())
}

fn bench_cmd(dir: &Path, repeats: usize) -> Result<()> {
    let r = load_run(dir)?;
    let test = r.data.subset(&r.data.split.test);
    let dc = &r.cfg.dynamics;
    let mut rows = vec![("proxy".to_string(), bench_inference(&r.proxy, None, &r.net, &test, repeats, dc)?)];
    let mut node_rows = Vec::new();
    if let Some(ss) = &r.surrogates {
        rows.push(("proxy+surrogates".into(), bench_inference(&r.proxy, Some(ss), &r.net, &test, repeats, dc)?));
        for (k, g) in r.net.generators.iter().enumerate() {
            let inputs = test
                .iter()
                .map(|s| {
                    let d = &s.optimum;
                    Ok(NodeInput::from_scenario(&scenario(g, d.p_r[k], d.q_r[k], d.v_mag[g.bus], d.v_ang[g.bus], dc)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let b = bench_node_vs_solver(&ss[k], g, &inputs, dc)?;
            node_rows.push((format!("g{k}_surrogate"), b.surrogate));
            node_rows.push((format!("g{k}_dopri5"), b.dopri5));
            node_rows.push((format!("g{k}_bosh3"), b.bosh3));
        }
    }
    std::fs::write(dir.join("bench_inference.csv"), timing_table(&rows))?;
    if !node_rows.is_empty() {
        std::fs::write(dir.join("bench_node.csv"), timing_table(&node_rows))?;
    }
    print!("{}", timing_table(&rows));
    if !node_rows.is_empty() {
        print!("{}", timing_table(&node_rows));
    }
    Ok(())
}
