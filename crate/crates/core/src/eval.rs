//! Closed-loop evaluation: recovery time, reactive effort, transient cost and
//! final-violation histograms over a fixed scenario set.
//!
//! A controlled entry counts as in band when its violation is at most
//! `recovery_tol`. Recovery is the first step from which every controlled
//! entry stays in band through the episode cap; an episode that is out of
//! band at the cap is unstabilized and charged the full cap.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::{stage_cost, EnvMode, VoltageEnv};
use crate::grid::{GridMatrices, RadialNetwork};
use crate::policy::{stability_gain_bound, Controller, LinearDroop};
use crate::scenario::Scenario;

pub const SCHEMA_VERSION: u32 = 1;
pub const EFFORT_DEFINITION: &str =
    "reactive_effort = sum over steps before recovery of ||u(t)||_1 on controlled entries (per-unit)";
pub const CSV_COLUMNS: [&str; 7] = [
    "scenario",
    "stabilized",
    "recovery_steps",
    "reactive_effort",
    "transient_cost",
    "max_final_violation",
    "diverged",
];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no scenarios to evaluate")]
    Empty,
    #[error("controller has {got} channels but the network controls {expected}")]
    Channels { expected: usize, got: usize },
    #[error("reports cover different scenario sets ({0})")]
    ScenarioMismatch(String),
    #[error("reports mix environment modes ({0} vs {1})")]
    ModeMismatch(EnvMode, EnvMode),
    #[error("scenario {index} has dimension {got}, network state has {expected}")]
    Dimension { index: usize, expected: usize, got: usize },
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub cap: usize,
    pub dt: f64,
    pub env: EnvMode,
    pub recovery_tol: f64,
    pub eta1: f64,
    pub eta2: f64,
    /// Upper edges of the histogram buckets as fractions of nominal voltage;
    /// a final open bucket collects everything above the last edge.
    pub buckets: Vec<f64>,
    pub record_traces: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            cap: 100,
            dt: 1.0,
            env: EnvMode::Nonlinear,
            recovery_tol: 1e-3,
            eta1: 100.0,
            eta2: 1.0,
            buckets: vec![0.01, 0.03, 0.05],
            record_traces: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: usize,
    pub stabilized: bool,
    pub recovery_steps: usize,
    pub reactive_effort: f64,
    pub transient_cost: f64,
    /// Final band-violation magnitude per controlled entry.
    pub final_violations: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diverged: Option<String>,
    /// Controlled-entry voltages for `t = 0..=cap` when traces are recorded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Stat> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Stat { mean, std: var.sqrt() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub label: String,
    pub lo: f64,
    /// `None` for the open top bucket.
    pub hi: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub scenarios: usize,
    pub stabilization_rate: f64,
    pub recovery_steps: Stat,
    pub reactive_effort: Stat,
    pub transient_cost: Stat,
    pub histogram: Vec<Bucket>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub policy: String,
    pub effort_definition: String,
    pub scenario_digest: String,
    pub config: EvalConfig,
    pub aggregates: Aggregates,
    pub scenarios: Vec<ScenarioResult>,
}

/// SHA-256 over the scenarios' canonical JSON.
pub fn scenario_digest(scenarios: &[Scenario]) -> String {
    let json = serde_json::to_vec(scenarios).expect("scenarios serialize");
    hex::encode(Sha256::digest(&json))
}

fn histogram(results: &[ScenarioResult], edges: &[f64], v_nom: f64) -> Vec<Bucket> {
    let pct = |x: f64| format!("{}%", x * 100.0);
    let mut buckets: Vec<Bucket> = Vec::with_capacity(edges.len() + 1);
    let mut lo = 0.0;
    for &hi in edges {
        buckets.push(Bucket {
            label: format!("[{}, {})", pct(lo), pct(hi)),
            lo,
            hi: Some(hi),
            count: 0,
        });
        lo = hi;
    }
    buckets.push(Bucket {
        label: format!(">= {}", pct(lo)),
        lo,
        hi: None,
        count: 0,
    });
    let top = buckets.len() - 1;
    for r in results {
        for &x in &r.final_violations {
            let rel = x / v_nom;
            let k = if r.diverged.is_some() || !rel.is_finite() {
                top
            } else {
                edges.iter().position(|&e| rel < e).unwrap_or(top)
            };
            buckets[k].count += 1;
        }
    }
    buckets
}

/// Runs one episode from a scenario and scores it.
pub fn rollout(
    net: &RadialNetwork,
    gm: &GridMatrices,
    ctrl: &dyn Controller,
    s: &Scenario,
    cfg: &EvalConfig,
) -> ScenarioResult {
    let mut env = VoltageEnv::new(net, gm, cfg.env, cfg.dt);
    let idx = env.controlled().to_vec();
    let limits = env.controlled_limits();
    let in_band = |v: &DVector<f64>| {
        idx.iter()
            .zip(&limits)
            .all(|(&i, b)| b.violation(v[i]).abs() <= cfg.recovery_tol)
    };
    let violations = |v: &DVector<f64>| -> Vec<f64> {
        idx.iter().zip(&limits).map(|(&i, b)| b.violation(v[i]).abs()).collect()
    };
    let mut ok = Vec::with_capacity(cfg.cap + 1);
    let mut efforts = Vec::with_capacity(cfg.cap);
    let mut costs = Vec::with_capacity(cfg.cap);
    let mut trace = cfg.record_traces.then(Vec::new);
    let mut diverged = None;
    let mut v = match env.reset(&s.p_vec(), &s.q0_vec()) {
        Ok(st) => st.v.clone(),
        Err(e) => {
            return ScenarioResult {
                scenario: s.index,
                stabilized: false,
                recovery_steps: cfg.cap,
                reactive_effort: 0.0,
                transient_cost: 0.0,
                final_violations: vec![f64::MAX; idx.len()],
                diverged: Some(e.to_string()),
                trace: None,
            }
        }
    };
    for t in 0..=cfg.cap {
        ok.push(in_band(&v));
        if let Some(tr) = trace.as_mut() {
            tr.push(idx.iter().map(|&i| v[i]).collect::<Vec<_>>());
        }
        if t == cfg.cap {
            break;
        }
        let u = ctrl.actions(&v, &idx);
        efforts.push(idx.iter().map(|&i| u[i].abs()).sum::<f64>());
        costs.push(
            idx.iter()
                .zip(&limits)
                .map(|(&i, b)| stage_cost(v[i], u[i], *b, cfg.eta1, cfg.eta2))
                .sum::<f64>(),
        );
        match env.step(&u) {
            Ok(st) => v = st.v.clone(),
            Err(e) => {
                diverged = Some(format!("step {}: {e}", t + 1));
                break;
            }
        }
    }
    let stabilized = diverged.is_none() && *ok.last().unwrap_or(&false);
    let recovery = if stabilized {
        ok.iter().rposition(|&b| !b).map_or(0, |t| t + 1)
    } else {
        cfg.cap
    };
    let window = recovery.min(efforts.len());
    ScenarioResult {
        scenario: s.index,
        stabilized,
        recovery_steps: recovery,
        reactive_effort: efforts[..window].iter().sum(),
        transient_cost: costs[..window].iter().sum(),
        final_violations: if diverged.is_some() {
            vec![f64::MAX; idx.len()]
        } else {
            violations(&v)
        },
        diverged,
        trace,
    }
}

pub fn evaluate(
    net: &RadialNetwork,
    gm: &GridMatrices,
    ctrl: &dyn Controller,
    scenarios: &[Scenario],
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    if scenarios.is_empty() {
        return Err(EvalError::Empty);
    }
    let expected = net.controlled_indices().len();
    if ctrl.n_channels() != expected {
        return Err(EvalError::Channels {
            expected,
            got: ctrl.n_channels(),
        });
    }
    for s in scenarios {
        for got in [s.p.len(), s.q0.len()] {
            if got != net.state_dim() {
                return Err(EvalError::Dimension {
                    index: s.index,
                    expected: net.state_dim(),
                    got,
                });
            }
        }
    }
    let results: Vec<ScenarioResult> = scenarios
        .par_iter()
        .map(|s| rollout(net, gm, ctrl, s, cfg))
        .collect();
    Ok(assemble(ctrl.label(), scenario_digest(scenarios), cfg.clone(), results, net.v0()))
}

fn assemble(policy: String, digest: String, config: EvalConfig, results: Vec<ScenarioResult>, v_nom: f64) -> EvalReport {
    let pick = |f: fn(&ScenarioResult) -> f64| results.iter().map(f).collect::<Vec<_>>();
    let n = results.len();
    let aggregates = Aggregates {
        scenarios: n,
        stabilization_rate: results.iter().filter(|r| r.stabilized).count() as f64 / n as f64,
        recovery_steps: Stat::of(&pick(|r| r.recovery_steps as f64)).expect("nonempty"),
        reactive_effort: Stat::of(&pick(|r| r.reactive_effort)).expect("nonempty"),
        transient_cost: Stat::of(&pick(|r| r.transient_cost)).expect("nonempty"),
        histogram: histogram(&results, &config.buckets, v_nom),
    };
    EvalReport {
        schema_version: SCHEMA_VERSION,
        policy,
        effort_definition: EFFORT_DEFINITION.into(),
        scenario_digest: digest,
        config,
        aggregates,
        scenarios: results,
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn write_csv(&self, out: impl Write) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_COLUMNS)?;
        for r in &self.scenarios {
            let worst = r.final_violations.iter().copied().fold(0.0, f64::max);
            w.write_record([
                r.scenario.to_string(),
                r.stabilized.to_string(),
                r.recovery_steps.to_string(),
                r.reactive_effort.to_string(),
                r.transient_cost.to_string(),
                worst.to_string(),
                r.diverged.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `series,x,y` rows: recovery steps and effort per scenario, histogram
    /// counts per bucket, and (when recorded) one voltage trace per channel
    /// and scenario.
    pub fn write_plotdata(&self, out: impl Write) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["series", "x", "y"])?;
        for r in &self.scenarios {
            w.write_record(["recovery_steps", &r.scenario.to_string(), &r.recovery_steps.to_string()])?;
        }
        for r in &self.scenarios {
            w.write_record(["reactive_effort", &r.scenario.to_string(), &r.reactive_effort.to_string()])?;
        }
        for (k, b) in self.aggregates.histogram.iter().enumerate() {
            w.write_record([format!("histogram:{}", b.label), k.to_string(), b.count.to_string()])?;
        }
        for r in &self.scenarios {
            if let Some(tr) = &r.trace {
                for (t, row) in tr.iter().enumerate() {
                    for (c, v) in row.iter().enumerate() {
                        w.write_record([format!("v:s{}:c{c}", r.scenario), t.to_string(), v.to_string()])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
    Plotdata,
}

pub fn emit(report: &EvalReport, format: Format, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    match format {
        Format::Json => {
            let mut f = f;
            f.write_all(report.to_json().as_bytes())?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        Format::Csv => report.write_csv(f)?,
        Format::Plotdata => report.write_plotdata(f)?,
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub policy: String,
    /// Restricted to the scenarios this policy stabilized.
    pub starred: bool,
    pub scenarios: usize,
    pub stabilization_rate: f64,
    pub recovery_steps: Option<Stat>,
    pub reactive_effort: Option<Stat>,
    pub transient_cost: Option<Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub env: EnvMode,
    pub scenario_digest: String,
    pub rows: Vec<ComparisonRow>,
}

fn row(name: &str, r: &EvalReport, starred: bool) -> ComparisonRow {
    let keep: Vec<&ScenarioResult> = r
        .scenarios
        .iter()
        .filter(|s| !starred || s.stabilized)
        .collect();
    let col = |f: fn(&ScenarioResult) -> f64| Stat::of(&keep.iter().map(|s| f(s)).collect::<Vec<_>>());
    ComparisonRow {
        policy: if starred { format!("{name}*") } else { name.to_string() },
        starred,
        scenarios: keep.len(),
        stabilization_rate: r.aggregates.stabilization_rate,
        recovery_steps: col(|s| s.recovery_steps as f64),
        reactive_effort: col(|s| s.reactive_effort),
        transient_cost: col(|s| s.transient_cost),
    }
}

/// One plain and one starred row per report. All reports must share the
/// scenario set and environment mode.
pub fn compare(reports: &[(String, EvalReport)]) -> Result<Comparison, EvalError> {
    let (_, first) = reports.first().ok_or(EvalError::Empty)?;
    for (name, r) in reports {
        if r.scenario_digest != first.scenario_digest {
            return Err(EvalError::ScenarioMismatch(format!(
                "{name} digest {} differs from {}",
                r.scenario_digest, first.scenario_digest
            )));
        }
        if r.config.env != first.config.env {
            return Err(EvalError::ModeMismatch(first.config.env, r.config.env));
        }
    }
    let rows = reports
        .iter()
        .flat_map(|(name, r)| [row(name, r, false), row(name, r, true)])
        .collect();
    Ok(Comparison {
        env: first.config.env,
        scenario_digest: first.scenario_digest.clone(),
        rows,
    })
}

impl Comparison {
    /// Columns: policy, stabilization_rate, n, then mean/std of recovery
    /// steps, reactive effort and transient cost. Empty cells read `NA`.
    pub fn write_csv(&self, out: impl Write) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "policy",
            "stabilization_rate",
            "n",
            "recovery_mean",
            "recovery_std",
            "effort_mean",
            "effort_std",
            "cost_mean",
            "cost_std",
        ])?;
        let cell = |s: &Option<Stat>, f: fn(&Stat) -> f64| s.as_ref().map_or("NA".to_string(), |s| f(s).to_string());
        for r in &self.rows {
            w.write_record([
                r.policy.clone(),
                r.stabilization_rate.to_string(),
                r.scenarios.to_string(),
                cell(&r.recovery_steps, |s| s.mean),
                cell(&r.recovery_steps, |s| s.std),
                cell(&r.reactive_effort, |s| s.mean),
                cell(&r.reactive_effort, |s| s.std),
                cell(&r.transient_cost, |s| s.mean),
                cell(&r.transient_cost, |s| s.std),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Plain-text table for terminals.
    pub fn render(&self) -> String {
        let fmt = |s: &Option<Stat>| s.as_ref().map_or("NA".to_string(), |s| format!("{:.3} +- {:.3}", s.mean, s.std));
        let mut out = format!(
            "{:<24} {:>8} {:>5} {:>20} {:>20} {:>20}\n",
            "policy", "stab", "n", "recovery", "effort", "cost"
        );
        for r in &self.rows {
            out += &format!(
                "{:<24} {:>8.3} {:>5} {:>20} {:>20} {:>20}\n",
                r.policy,
                r.stabilization_rate,
                r.scenarios,
                fmt(&r.recovery_steps),
                fmt(&r.reactive_effort),
                fmt(&r.transient_cost)
            );
        }
        out
    }
}

/// Best uniform droop gain on an evenly spaced grid over `(0, bound]`, with
/// `bound = 2 sigma_min(X) / sigma_max(X)^2` on the controlled entries.
/// Ranked by mean recovery steps, then stabilization rate, then cost.
pub fn tune_linear_droop(
    net: &RadialNetwork,
    gm: &GridMatrices,
    scenarios: &[Scenario],
    cfg: &EvalConfig,
    grid: usize,
) -> Result<(f64, EvalReport), EvalError> {
    let bound = stability_gain_bound(&gm.x_sub(&net.controlled_indices()))?;
    let mut best: Option<(f64, EvalReport)> = None;
    for k in 1..=grid.max(1) {
        let gain = bound * k as f64 / grid.max(1) as f64;
        let rep = evaluate(net, gm, &LinearDroop::uniform(net, gain), scenarios, cfg)?;
        let better = match &best {
            None => true,
            Some((_, b)) => {
                let (a, c) = (&rep.aggregates, &b.aggregates);
                (a.recovery_steps.mean, -a.stabilization_rate, a.transient_cost.mean)
                    < (c.recovery_steps.mean, -c.stabilization_rate, c.transient_cost.mean)
            }
        };
        if better {
            best = Some((gain, rep));
        }
    }
    Ok(best.expect("grid is nonempty"))
}
