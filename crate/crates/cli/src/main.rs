//! `voltguard`: inspect feeders, certify and train monotone voltage
//! controllers, evaluate them against droop baselines and replay load data.
//!
//! Exit codes: 0 success, 1 a stability certificate failed, 2 bad input.

mod manifest;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use manifest::ManifestBuilder;
use voltguard::env::EnvMode;
use voltguard::eval::{self, compare, evaluate, tune_linear_droop, EvalConfig, EvalReport};
use voltguard::grid::{build_rx_matrices, check_diagonal_dominance, load_network, GridMatrices, PhaseModel, RadialNetwork};
use voltguard::lyapunov::{certify, certify_exponential, slope_ceiling, StabilityCertificate};
use voltguard::policy::{stability_gain_bound, Controller, LinearDroop, MonotonePolicy, PolicyInit};
use voltguard::rl::{self, write_curve_csv, RlError, TrainConfig};
use voltguard::scenario::{
    generate, load_timeseries, replay, scenarios_from_json, scenarios_to_json, synthetic_profile, ProfileConfig, Scenario,
    ScenarioConfig, ScenarioKind,
};

/// Marks a failed stability certificate (exit code 1).
#[derive(Debug)]
struct CertificationFailed(String);

impl std::fmt::Display for CertificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "certification failed: {}", self.0)
    }
}

impl std::error::Error for CertificationFailed {}

#[derive(Parser)]
#[command(name = "voltguard", version, about = "Stability-certified voltage control toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Network summaries and sensitivity matrices.
    #[command(subcommand)]
    Net(NetCommand),
    /// Check a policy checkpoint against the discrete-time stability condition.
    Certify(CertifyArgs),
    /// Train a monotone policy; every checkpoint is certified before it is written.
    Train(TrainArgs),
    /// Closed-loop evaluation of checkpoints and droop baselines on one scenario set.
    Eval(EvalArgs),
    /// Drive the nonlinear feeder through a load/PV time series with and without control.
    Replay(ReplayArgs),
    /// Write a synthetic daily load/PV profile.
    GenProfile(GenProfileArgs),
    /// Policy checkpoint utilities.
    #[command(subcommand)]
    Policy(PolicyCommand),
    /// Disturbance scenario utilities.
    #[command(subcommand)]
    Scenarios(ScenariosCommand),
}

#[derive(Subcommand)]
enum NetCommand {
    /// Topology, positive-definiteness of X, gain bounds and (three-phase) dominance.
    Inspect {
        network: PathBuf,
        /// Emit JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// R and X as JSON (stdout, or `matrices.json` under --out).
    Matrices {
        network: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct CertifyArgs {
    network: PathBuf,
    checkpoint: PathBuf,
    /// Control interval.
    #[arg(long, default_value_t = 1.0)]
    dt: f64,
    /// Exponential-rate certificate with contraction parameter c in (0, 1].
    #[arg(long)]
    exponential: Option<f64>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct TrainArgs {
    network: PathBuf,
    /// JSON or TOML training config (`.toml` selects TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    env: Option<EnvMode>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    network: PathBuf,
    /// Policy checkpoint (repeatable).
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    /// Linear droop with this gain (repeatable).
    #[arg(long)]
    linear: Vec<f64>,
    /// Linear droop at the stability gain bound 2 sigma_min(X) / sigma_max(X)^2.
    #[arg(long)]
    linear_auto: bool,
    /// Best linear droop over this many evenly spaced gains in (0, bound].
    #[arg(long)]
    linear_tuned: Option<usize>,
    /// Scenario file written by `scenarios generate`.
    #[arg(long, conflicts_with = "generate")]
    scenarios: Option<PathBuf>,
    /// Generate this many scenarios instead of reading a file.
    #[arg(long)]
    generate: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "mixed")]
    kind: ScenarioKind,
    #[arg(long, default_value = "nonlinear")]
    env: EnvMode,
    #[arg(long, default_value_t = 1.0)]
    dt: f64,
    /// Episode cap in steps.
    #[arg(long, default_value_t = 100)]
    cap: usize,
    /// Band tolerance for recovery (squared per-unit).
    #[arg(long, default_value_t = 1e-3)]
    recovery_tol: f64,
    /// Record controlled-bus voltage traces in the reports.
    #[arg(long)]
    traces: bool,
    /// Worker threads for scenario rollouts.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    network: PathBuf,
    checkpoint: PathBuf,
    timeseries: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    dt: f64,
    /// Control updates per sample.
    #[arg(long, default_value_t = 4)]
    substeps: usize,
    #[arg(long, default_value_t = 1e-3)]
    recovery_tol: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenProfileArgs {
    network: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    days: usize,
    #[arg(long, default_value_t = 96)]
    steps_per_day: usize,
    #[arg(long)]
    pv_peak_kw: Option<f64>,
}

#[derive(Subcommand)]
enum PolicyCommand {
    /// Write a fresh droop-shaped monotone policy.
    Init {
        network: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        slope: f64,
        #[arg(long, default_value_t = 8)]
        units: usize,
        #[arg(long, default_value_t = 0.02)]
        knot_spacing: f64,
    },
}

#[derive(Subcommand)]
enum ScenariosCommand {
    /// Write `scenarios.json` with seeded out-of-band initial states.
    Generate {
        network: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "mixed")]
        kind: ScenarioKind,
        #[arg(long, default_value_t = 0.05)]
        min_deviation: f64,
        #[arg(long, default_value_t = 0.15)]
        max_deviation: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let cert = e.downcast_ref::<CertificationFailed>().is_some()
                || matches!(e.downcast_ref::<RlError>(), Some(RlError::Checkpoint(_)));
            ExitCode::from(if cert { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Net(NetCommand::Inspect { network, json }) => net_inspect(&network, json),
        Command::Net(NetCommand::Matrices { network, out }) => net_matrices(&network, out.as_deref()),
        Command::Certify(a) => cmd_certify(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Replay(a) => cmd_replay(a),
        Command::GenProfile(a) => cmd_gen_profile(a),
        Command::Policy(PolicyCommand::Init {
            network,
            out,
            slope,
            units,
            knot_spacing,
        }) => policy_init(&network, &out, slope, units, knot_spacing),
        Command::Scenarios(ScenariosCommand::Generate {
            network,
            count,
            seed,
            kind,
            min_deviation,
            max_deviation,
            out,
        }) => {
            let cfg = ScenarioConfig {
                deviation_range: (min_deviation, max_deviation),
                ..ScenarioConfig::new(kind, count, seed)
            };
            scenarios_generate(&network, &cfg, &out)
        }
    }
}

fn load(network: &Path) -> Result<(RadialNetwork, GridMatrices)> {
    let net = load_network(network).with_context(|| format!("loading {}", network.display()))?;
    let gm = build_rx_matrices(&net).context("building sensitivity matrices")?;
    Ok((net, gm))
}

fn load_policy(path: &Path, net: &RadialNetwork) -> Result<MonotonePolicy> {
    let p = MonotonePolicy::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    p.check_network(net)
        .with_context(|| format!("checkpoint {} does not match the network", path.display()))?;
    Ok(p)
}

fn matrix_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Serialize)]
struct LineDominance {
    line: usize,
    from: usize,
    to: usize,
    dominant: bool,
}

#[derive(Serialize)]
struct Inspection {
    buses: usize,
    lines: usize,
    phase_model: String,
    state_dim: usize,
    controlled: Vec<usize>,
    depth: usize,
    x_min_eig: f64,
    x_positive_definite: bool,
    x_controlled_eigs: (f64, f64),
    x_controlled: Vec<Vec<f64>>,
    linear_gain_bound: f64,
    slope_ceiling_dt1: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    dominance: Vec<LineDominance>,
}

fn net_inspect(network: &Path, json: bool) -> Result<()> {
    let (net, gm) = load(network)?;
    let idx = net.controlled_indices();
    let xc = gm.x_sub(&idx);
    let eig = voltguard::grid::sym_eigenvalues(&xc);
    let depth = net
        .buses()
        .map(|b| {
            let mut d = 0;
            let mut cur = b;
            while let Some(p) = net.parent(cur) {
                d += 1;
                cur = p;
            }
            d
        })
        .max()
        .unwrap_or(0);
    let dominance = if net.phase_model() == PhaseModel::Three {
        net.lines()
            .iter()
            .enumerate()
            .map(|(k, l)| LineDominance {
                line: k,
                from: l.from.0,
                to: l.to.0,
                dominant: check_diagonal_dominance(l),
            })
            .collect()
    } else {
        Vec::new()
    };
    let info = Inspection {
        buses: net.n_buses(),
        lines: net.lines().len(),
        phase_model: format!("{:?}", net.phase_model()),
        state_dim: net.state_dim(),
        controlled: net.controlled().iter().map(|b| b.0).collect(),
        depth,
        x_min_eig: gm.certificate.min_eig,
        x_positive_definite: gm.certificate.pd,
        x_controlled_eigs: (eig[0], eig[eig.len() - 1]),
        x_controlled: matrix_rows(&xc),
        linear_gain_bound: stability_gain_bound(&xc)?,
        slope_ceiling_dt1: slope_ceiling(&gm, &net, 1.0, 1.0),
        dominance,
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&info)?);
        return Ok(());
    }
    let mut s = String::new();
    writeln!(s, "buses {}  lines {}  model {}  state dim {}  depth {}", info.buses, info.lines, info.phase_model, info.state_dim, info.depth)?;
    writeln!(s, "controlled buses {:?}", info.controlled)?;
    writeln!(s, "X min eigenvalue {:.6e} ({})", info.x_min_eig, if info.x_positive_definite { "positive definite" } else { "NOT positive definite" })?;
    writeln!(s, "X on controlled entries: eigenvalues in [{:.6}, {:.6}]", info.x_controlled_eigs.0, info.x_controlled_eigs.1)?;
    writeln!(s, "linear droop gain bound {:.6}", info.linear_gain_bound)?;
    writeln!(s, "slope ceiling 2/(dt lambda_max) at dt=1: {:.6}", info.slope_ceiling_dt1)?;
    if net.controlled().len() <= 8 && net.phase_model() == PhaseModel::Single {
        writeln!(s, "X (controlled) = {:?}", info.x_controlled)?;
    }
    if !info.dominance.is_empty() {
        writeln!(s, "line  from  to  dominant")?;
        for d in &info.dominance {
            writeln!(s, "{:>4}  {:>4}  {:>2}  {}", d.line, d.from, d.to, if d.dominant { "yes" } else { "no" })?;
        }
    }
    print!("{s}");
    Ok(())
}

#[derive(Serialize)]
struct Matrices {
    ordering: Vec<String>,
    r: Vec<Vec<f64>>,
    x: Vec<Vec<f64>>,
    x_min_eig: f64,
}

fn net_matrices(network: &Path, out: Option<&Path>) -> Result<()> {
    let (_, gm) = load(network)?;
    let m = Matrices {
        ordering: gm.ordering.iter().map(|s| s.to_string()).collect(),
        r: matrix_rows(&gm.r),
        x: matrix_rows(&gm.x),
        x_min_eig: gm.certificate.min_eig,
    };
    let text = serde_json::to_string_pretty(&m)? + "\n";
    match out {
        None => print!("{text}"),
        Some(dir) => {
            let mut mb = ManifestBuilder::start(dir, &"net matrices")?;
            mb.input(network)?;
            mb.write("matrices.json", text.as_bytes())?;
            mb.finish()?;
        }
    }
    Ok(())
}

fn certificate_for(gm: &GridMatrices, net: &RadialNetwork, p: &MonotonePolicy, dt: f64, exponential: Option<f64>) -> Result<StabilityCertificate> {
    Ok(match exponential {
        None => certify(gm, net, p, dt)?,
        Some(c) => certify_exponential(gm, net, p, dt, c)?,
    })
}

fn render_certificate(c: &StabilityCertificate) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "certificate {} ({:?}, dt = {})", if c.passed { "PASSED" } else { "FAILED" }, c.mode, c.dt);
    let _ = writeln!(s, "  upper margin lambda_min = {:.6e}", c.min_eig_upper);
    if let Some(l) = c.min_eig_lower {
        let _ = writeln!(s, "  lower margin lambda_min = {l:.6e}");
    }
    let _ = writeln!(s, "  slopes >= {} outside band: {}", c.slope_floor, c.strict_negativity);
    let _ = writeln!(s, "  dt_max = {:.6} (control rate must exceed {:.6})", c.dt_max, c.min_control_rate);
    let _ = writeln!(s, "  per-channel max slopes {:?}", c.per_bus_slopes);
    let _ = writeln!(s, "  per-channel min slopes {:?}", c.per_bus_min_slopes);
    s
}

fn cmd_certify(a: CertifyArgs) -> Result<()> {
    let (net, gm) = load(&a.network)?;
    let p = load_policy(&a.checkpoint, &net)?;
    let cert = certificate_for(&gm, &net, &p, a.dt, a.exponential)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&cert)?);
    } else {
        print!("{}", render_certificate(&cert));
    }
    if cert.passed {
        Ok(())
    } else {
        Err(CertificationFailed(format!("{} at dt = {}", a.checkpoint.display(), a.dt)).into())
    }
}

fn read_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

#[derive(Serialize)]
struct CheckpointRecord {
    episode: usize,
    file: String,
    certificate: StabilityCertificate,
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (net, gm) = load(&a.network)?;
    let mut cfg = match &a.config {
        Some(p) => read_train_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(e) = a.episodes {
        cfg.episodes = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(env) = a.env {
        cfg.env = env;
    }
    if let Some(k) = a.checkpoint_every {
        cfg.checkpoint_every = k;
    }
    cfg.validate()?;
    let mut mb = ManifestBuilder::start(&a.out, &cfg)?;
    mb.seed(cfg.seed).input(&a.network)?;
    if let Some(p) = &a.config {
        mb.input(p)?;
    }
    mb.write("config.json", (serde_json::to_string_pretty(&cfg)? + "\n").as_bytes())?;
    let mut records = Vec::new();
    let out = rl::train(&net, &gm, &cfg, |episode, policy| {
        let cert = certify(&gm, &net, policy, cfg.dt).map_err(|e| RlError::Checkpoint(e.to_string()))?;
        if !cert.passed {
            return Err(RlError::Checkpoint(format!(
                "episode {episode}: upper margin {:.3e}, floor ok {}",
                cert.min_eig_upper, cert.strict_negativity
            )));
        }
        let name = format!("checkpoints/episode_{episode:06}.json");
        mb.write(&name, (policy.to_json() + "\n").as_bytes())
            .map_err(|e| RlError::Checkpoint(e.to_string()))?;
        records.push(CheckpointRecord {
            episode,
            file: name,
            certificate: cert,
        });
        Ok(())
    })?;
    mb.write("policy.json", (out.policy.to_json() + "\n").as_bytes())?;
    let mut curve = Vec::new();
    write_curve_csv(&out.curve, &mut curve)?;
    mb.write("curve.csv", &curve)?;
    mb.write("certificates.json", (serde_json::to_string_pretty(&records)? + "\n").as_bytes())?;
    mb.write("aborted.json", (serde_json::to_string_pretty(&out.aborted)? + "\n").as_bytes())?;
    mb.note("checkpoints", records.len()).note("aborted_episodes", out.aborted.len());
    let dir = mb.dir().to_path_buf();
    mb.finish()?;
    let tail = out.curve.last();
    println!(
        "trained {} episodes ({} aborted); {} certified checkpoints in {}",
        out.curve.len(),
        out.aborted.len(),
        records.len(),
        dir.display()
    );
    if let Some(p) = tail {
        println!("last episode return {:.6}, mean recovery steps {:.2}", p.ret, p.mean_recovery_steps);
    }
    Ok(())
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    if let Some(j) = a.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| anyhow!("configuring {j} workers: {e}"))?;
    }
    let (net, gm) = load(&a.network)?;
    let scenarios: Vec<Scenario> = match (&a.scenarios, a.generate) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let s = scenarios_from_json(&text)?;
            for sc in &s {
                if sc.p.len() != net.state_dim() {
                    bail!("scenario {} has dimension {}, network state has {}", sc.index, sc.p.len(), net.state_dim());
                }
            }
            s
        }
        (None, Some(n)) => generate(&net, &gm, &ScenarioConfig::new(a.kind, n, a.seed))?,
        (None, None) => bail!("pass --scenarios FILE or --generate N"),
    };
    let cfg = EvalConfig {
        cap: a.cap,
        dt: a.dt,
        env: a.env,
        recovery_tol: a.recovery_tol,
        record_traces: a.traces,
        ..EvalConfig::default()
    };
    let mut mb = ManifestBuilder::start(&a.out, &cfg)?;
    mb.input(&a.network)?;
    if let Some(p) = &a.scenarios {
        mb.input(p)?;
    } else {
        mb.seed(a.seed);
    }
    let mut reports: Vec<(String, EvalReport)> = Vec::new();
    for path in &a.checkpoint {
        mb.input(path)?;
        let p = load_policy(path, &net)?;
        let name = path.file_stem().map_or("checkpoint".into(), |s| s.to_string_lossy().to_string());
        reports.push((name, evaluate(&net, &gm, &p, &scenarios, &cfg)?));
    }
    for &g in &a.linear {
        reports.push((format!("linear_{g}"), evaluate(&net, &gm, &LinearDroop::uniform(&net, g), &scenarios, &cfg)?));
    }
    if a.linear_auto {
        let g = stability_gain_bound(&gm.x_sub(&net.controlled_indices()))?;
        mb.note("linear_auto_gain", g);
        reports.push(("linear_auto".into(), evaluate(&net, &gm, &LinearDroop::uniform(&net, g), &scenarios, &cfg)?));
    }
    if let Some(grid) = a.linear_tuned {
        let (g, rep) = tune_linear_droop(&net, &gm, &scenarios, &cfg, grid)?;
        mb.note("linear_tuned_gain", g);
        reports.push(("linear_tuned".into(), rep));
    }
    if reports.is_empty() {
        bail!("nothing to evaluate: pass --checkpoint, --linear, --linear-auto or --linear-tuned");
    }
    mb.write("scenarios.json", (scenarios_to_json(&scenarios) + "\n").as_bytes())?;
    for (k, (name, rep)) in reports.iter().enumerate() {
        let stem = format!("{k:02}_{}", slug(name));
        mb.write(&format!("{stem}.json"), (rep.to_json() + "\n").as_bytes())?;
        let mut csv = Vec::new();
        rep.write_csv(&mut csv)?;
        mb.write(&format!("{stem}.csv"), &csv)?;
        let mut plot = Vec::new();
        rep.write_plotdata(&mut plot)?;
        mb.write(&format!("{stem}.plot.csv"), &plot)?;
    }
    let table = compare(&reports)?;
    let mut csv = Vec::new();
    table.write_csv(&mut csv)?;
    mb.write("comparison.csv", &csv)?;
    mb.write("comparison.json", (serde_json::to_string_pretty(&table)? + "\n").as_bytes())?;
    mb.note("scenario_digest", &table.scenario_digest);
    mb.finish()?;
    println!("{} scenarios, {} environment", scenarios.len(), table.env);
    print!("{}", table.render());
    Ok(())
}

fn cmd_replay(a: ReplayArgs) -> Result<()> {
    let (net, _) = load(&a.network)?;
    let p = load_policy(&a.checkpoint, &net)?;
    let ts = load_timeseries(&a.timeseries)?;
    let rep = replay(&net, &p, &ts, a.dt, a.substeps)?;
    #[derive(Serialize)]
    struct Run {
        dt: f64,
        substeps: usize,
    }
    let mut mb = ManifestBuilder::start(&a.out, &Run { dt: a.dt, substeps: a.substeps })?;
    mb.input(&a.network)?.input(&a.checkpoint)?.input(&a.timeseries)?;
    mb.write("replay.json", (serde_json::to_string_pretty(&rep)? + "\n").as_bytes())?;
    let mut plot = String::from("series,x,y\n");
    for (t, ts_) in rep.timestamps.iter().enumerate() {
        for (c, ch) in rep.channels.iter().enumerate() {
            writeln!(plot, "uncontrolled:{ch},{ts_},{}", rep.uncontrolled[t][c])?;
            writeln!(plot, "controlled:{ch},{ts_},{}", rep.controlled[t][c])?;
            writeln!(plot, "action:{ch},{ts_},{}", rep.actions[t][c])?;
        }
    }
    mb.write("traces.plot.csv", plot.as_bytes())?;
    let frac = rep.in_band_fraction_after_recovery(&net, a.recovery_tol);
    mb.note("in_band_fraction_after_recovery", frac).note("failures", rep.failures.len());
    mb.finish()?;
    match frac {
        Some(f) => println!("{} samples; controlled voltages in band for {:.2}% of samples after first recovery", rep.timestamps.len(), 100.0 * f),
        None => println!("{} samples; controlled voltages never entered the band", rep.timestamps.len()),
    }
    if !rep.failures.is_empty() {
        println!("{} power-flow failures (previous voltages carried forward)", rep.failures.len());
    }
    Ok(())
}

fn cmd_gen_profile(a: GenProfileArgs) -> Result<()> {
    let (net, _) = load(&a.network)?;
    let mut cfg = ProfileConfig {
        seed: a.seed,
        days: a.days,
        steps_per_day: a.steps_per_day,
        ..ProfileConfig::default()
    };
    if let Some(pv) = a.pv_peak_kw {
        cfg.pv_peak_kw = pv;
    }
    let ts = synthetic_profile(&net, &cfg);
    let mut mb = ManifestBuilder::start(&a.out, &cfg)?;
    mb.seed(cfg.seed).input(&a.network)?;
    mb.write("profile.csv", ts.to_csv_string().as_bytes())?;
    mb.finish()?;
    println!("{} samples for {} buses", ts.len(), ts.buses.len());
    Ok(())
}

fn policy_init(network: &Path, out: &Path, slope: f64, units: usize, knot_spacing: f64) -> Result<()> {
    let (net, _) = load(network)?;
    let init = PolicyInit {
        d: units,
        slope,
        knot_spacing,
    };
    let p = MonotonePolicy::init(&net, &init)?;
    let mut mb = ManifestBuilder::start(out, &init)?;
    mb.input(network)?;
    mb.write("policy.json", (p.to_json() + "\n").as_bytes())?;
    mb.finish()?;
    println!("{} channels, {} units each, slope {slope} ({})", p.n_channels(), units, p.label());
    Ok(())
}

fn scenarios_generate(network: &Path, cfg: &ScenarioConfig, out: &Path) -> Result<()> {
    let (net, gm) = load(network)?;
    let s = generate(&net, &gm, cfg)?;
    let mut mb = ManifestBuilder::start(out, cfg)?;
    mb.seed(cfg.seed).input(network)?;
    mb.write("scenarios.json", (scenarios_to_json(&s) + "\n").as_bytes())?;
    mb.note("scenario_digest", eval::scenario_digest(&s));
    mb.finish()?;
    println!("{} scenarios", s.len());
    Ok(())
}
