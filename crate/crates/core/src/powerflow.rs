//! Nonlinear branch-flow solvers used as the evaluation environment.
//!
//! Single-phase networks are solved directly on the DistFlow variables
//! `(P, Q, l, v)` by backward/forward sweeps. Three-phase networks keep complex
//! phasor voltages internally and sweep line currents through the full 3x3
//! phase impedance matrices; only squared magnitudes are reported.

use nalgebra::{DVector, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{BusId, GridError, PhaseModel, RadialNetwork};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("power flow did not converge in {iterations} iterations (last residual {:e})", .residual_trace.last().copied().unwrap_or(f64::NAN))]
    NonConvergence {
        iterations: usize,
        residual_trace: Vec<f64>,
    },
    #[error("infeasible operating point: v <= 0 at bus {bus} (iteration {iteration})")]
    Infeasible { bus: BusId, iteration: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("invalid solver options: {0}")]
    Options(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowOptions {
    /// Convergence threshold on the max change of any squared voltage.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions {
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

/// Converged operating point. Per-line quantities are indexed by line (and,
/// for three-phase networks, line-major with three phases per line).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSolution {
    /// Squared voltage magnitudes in state ordering (substation excluded).
    pub v: DVector<f64>,
    pub p_flow: Vec<f64>,
    pub q_flow: Vec<f64>,
    /// Squared line currents.
    pub l: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

impl FlowSolution {
    /// Sum of resistive losses `r l` over single-phase lines.
    pub fn total_loss(&self, net: &RadialNetwork) -> f64 {
        net.lines()
            .iter()
            .zip(&self.l)
            .filter_map(|(line, l)| line.rx().map(|(r, _)| r * l))
            .sum()
    }
}

fn check_inputs(
    net: &RadialNetwork,
    p: &DVector<f64>,
    q: &DVector<f64>,
    opts: &FlowOptions,
) -> Result<(), FlowError> {
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(FlowError::Options(format!(
            "tol must be positive and max_iter nonzero (tol={}, max_iter={})",
            opts.tol, opts.max_iter
        )));
    }
    for len in [p.len(), q.len()] {
        if len != net.state_dim() {
            return Err(GridError::Dimension {
                expected: net.state_dim(),
                got: len,
            }
            .into());
        }
    }
    Ok(())
}

/// Dispatches on the network's phase model.
pub fn solve(
    net: &RadialNetwork,
    p: &DVector<f64>,
    q: &DVector<f64>,
    opts: &FlowOptions,
) -> Result<FlowSolution, FlowError> {
    match net.phase_model() {
        PhaseModel::Single => solve_distflow(net, p, q, opts),
        PhaseModel::Three => solve_distflow_threephase(net, p, q, opts),
    }
}

/// Backward/forward sweep on the DistFlow equations, flat start from `v0`.
///
/// Each iteration refreshes `l = (P^2 + Q^2) / v_from` from the previous
/// iterate, accumulates `P_ij = -p_j + r l + sum P_jk` (and likewise `Q`)
/// towards the root, then propagates
/// `v_j = v_i - 2 (r P + x Q) + (r^2 + x^2) l` towards the leaves.
pub fn solve_distflow(
    net: &RadialNetwork,
    p: &DVector<f64>,
    q: &DVector<f64>,
    opts: &FlowOptions,
) -> Result<FlowSolution, FlowError> {
    check_inputs(net, p, q, opts)?;
    let n = net.n_buses();
    let lines = net.lines();
    let children = net.children();
    let order = net.bfs_order();
    let rx: Vec<(f64, f64)> = lines
        .iter()
        .map(|l| l.rx().expect("single-phase network"))
        .collect();

    let mut v = vec![net.v0(); n];
    let mut pf = vec![0.0; lines.len()];
    let mut qf = vec![0.0; lines.len()];
    let mut l = vec![0.0; lines.len()];
    let mut trace = Vec::new();

    for iteration in 1..=opts.max_iter {
        for (k, line) in lines.iter().enumerate() {
            l[k] = (pf[k] * pf[k] + qf[k] * qf[k]) / v[line.from.0];
        }
        for &b in order.iter().rev() {
            if b.0 == 0 {
                continue;
            }
            let k = net.parent_line(b).expect("non-root");
            let (r, x) = rx[k];
            let (mut ps, mut qs) = (-p[b.0 - 1] + r * l[k], -q[b.0 - 1] + x * l[k]);
            for &c in &children[b.0] {
                ps += pf[c];
                qs += qf[c];
            }
            pf[k] = ps;
            qf[k] = qs;
        }
        let mut residual: f64 = 0.0;
        for &b in order.iter().skip(1) {
            let k = net.parent_line(b).expect("non-root");
            let (r, x) = rx[k];
            let from = lines[k].from.0;
            let vb = v[from] - 2.0 * (r * pf[k] + x * qf[k]) + (r * r + x * x) * l[k];
            if !(vb > 0.0) {
                return Err(FlowError::Infeasible { bus: b, iteration });
            }
            residual = residual.max((vb - v[b.0]).abs());
            v[b.0] = vb;
        }
        trace.push(residual);
        if residual < opts.tol {
            return Ok(FlowSolution {
                v: DVector::from_iterator(n - 1, v[1..].iter().copied()),
                p_flow: pf,
                q_flow: qf,
                l,
                iterations: iteration,
                residual,
            });
        }
    }
    Err(FlowError::NonConvergence {
        iterations: opts.max_iter,
        residual_trace: trace,
    })
}

/// Current-summation sweep on complex phase voltages. The substation is held
/// at the balanced phasor `sqrt(v0) [1, a, a^2]`.
pub fn solve_distflow_threephase(
    net: &RadialNetwork,
    p: &DVector<f64>,
    q: &DVector<f64>,
    opts: &FlowOptions,
) -> Result<FlowSolution, FlowError> {
    check_inputs(net, p, q, opts)?;
    let n = net.n_buses();
    let lines = net.lines();
    let children = net.children();
    let order = net.bfs_order();
    let z: Vec<_> = lines
        .iter()
        .map(|l| *l.z_matrix().expect("three-phase network"))
        .collect();
    let al = crate::grid::threephase_alpha();
    let root = Vector3::from_fn(|ph, _| al[ph] * net.v0().sqrt());

    let mut volts = vec![root; n];
    let mut current = vec![Vector3::<Complex64>::zeros(); lines.len()];
    let mut trace = Vec::new();

    for iteration in 1..=opts.max_iter {
        for &b in order.iter().rev() {
            if b.0 == 0 {
                continue;
            }
            let k = net.parent_line(b).expect("non-root");
            let mut j = Vector3::zeros();
            for ph in 0..3 {
                let s = Complex64::new(p[3 * (b.0 - 1) + ph], q[3 * (b.0 - 1) + ph]);
                // injected current conj(s / V); line current carries its negative
                j[ph] = -(s / volts[b.0][ph]).conj();
            }
            for &c in &children[b.0] {
                j += current[c];
            }
            current[k] = j;
        }
        let mut residual: f64 = 0.0;
        for &b in order.iter().skip(1) {
            let k = net.parent_line(b).expect("non-root");
            let from = lines[k].from.0;
            let vb = volts[from] - z[k] * current[k];
            for ph in 0..3 {
                let mag = vb[ph].norm_sqr();
                if !(mag > 0.0) || !mag.is_finite() {
                    return Err(FlowError::Infeasible { bus: b, iteration });
                }
                residual = residual.max((mag - volts[b.0][ph].norm_sqr()).abs());
            }
            volts[b.0] = vb;
        }
        trace.push(residual);
        if residual < opts.tol {
            let mut p_flow = Vec::with_capacity(3 * lines.len());
            let mut q_flow = Vec::with_capacity(3 * lines.len());
            let mut l = Vec::with_capacity(3 * lines.len());
            for (k, line) in lines.iter().enumerate() {
                for ph in 0..3 {
                    let s = volts[line.from.0][ph] * current[k][ph].conj();
                    p_flow.push(s.re);
                    q_flow.push(s.im);
                    l.push(current[k][ph].norm_sqr());
                }
            }
            let v = DVector::from_iterator(
                3 * (n - 1),
                volts[1..].iter().flat_map(|vb| vb.iter().map(|c| c.norm_sqr())),
            );
            return Ok(FlowSolution {
                v,
                p_flow,
                q_flow,
                l,
                iterations: iteration,
                residual,
            });
        }
    }
    Err(FlowError::NonConvergence {
        iterations: opts.max_iter,
        residual_trace: trace,
    })
}
