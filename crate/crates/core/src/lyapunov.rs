//! Stability certification for decentralized monotone controllers.
//!
//! Closed loop on the controlled entries: `v(t+1) = v(t) - dt X g(v(t))`.
//! With `V(v) = dt^2 g(v)^T X g(v)`, the voltage converges to the safe set
//! whenever every slope of `g` outside the deadband is positive and the
//! Jacobian `D = diag(g')` satisfies `(2 / dt) X^-1 - D > 0`. Since `D` is
//! diagonal and bounded by the exact per-channel suprema of `g'`, checking
//! the matrix inequality at those suprema suffices.
//!
//! `X` here is the symmetric part of the sensitivity restricted to the
//! controlled entries.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{band_distance, EnvError, VoltageEnv};
use crate::grid::{sym_eigenvalues, GridError, GridMatrices, RadialNetwork};
use crate::policy::{Controller, SLOPE_FLOOR};

/// Minimum eigenvalue margin for a matrix to count as positive definite.
pub const EIG_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum LyapunovError {
    #[error("controller '{0}' does not expose exact slope bounds and cannot be certified")]
    Uncertifiable(String),
    #[error("controller has {got} channels but the network controls {expected}")]
    Channels { expected: usize, got: usize },
    #[error("invalid exponential-stability rate c = {0} (need 0 < c < 1)")]
    BadRate(f64),
    #[error("dt must be positive (got {0})")]
    BadDt(f64),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CertificateMode {
    Asymptotic,
    Exponential { c: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityCertificate {
    pub passed: bool,
    pub mode: CertificateMode,
    pub dt: f64,
    /// `lambda_min((b / dt) X^-1 - diag(s_max))` with `b = 2` in asymptotic
    /// mode and `b = 1 + sqrt(1 - c)` in exponential mode.
    pub min_eig_upper: f64,
    /// Exponential mode only: `lambda_min(diag(s_min) - (a / dt) X^-1)`,
    /// `a = 1 - sqrt(1 - c)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_eig_lower: Option<f64>,
    /// Every out-of-band slope is at least `slope_floor`.
    pub strict_negativity: bool,
    pub slope_floor: f64,
    /// Largest sampling interval for which the upper inequality holds
    /// (exclusive); infinite if every slope is zero.
    pub dt_max: f64,
    /// `1 / dt_max`: the control rate must exceed this.
    pub min_control_rate: f64,
    pub per_bus_slopes: Vec<f64>,
    pub per_bus_min_slopes: Vec<f64>,
}

struct Prepared {
    x: DMatrix<f64>,
    x_inv: DMatrix<f64>,
    s_min: Vec<f64>,
    s_max: Vec<f64>,
}

fn prepare(
    gm: &GridMatrices,
    net: &RadialNetwork,
    ctrl: &dyn Controller,
    dt: f64,
) -> Result<Prepared, LyapunovError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(LyapunovError::BadDt(dt));
    }
    let idx = net.controlled_indices();
    if ctrl.n_channels() != idx.len() {
        return Err(LyapunovError::Channels {
            expected: idx.len(),
            got: ctrl.n_channels(),
        });
    }
    let bounds = ctrl
        .slope_bounds()
        .ok_or_else(|| LyapunovError::Uncertifiable(ctrl.label()))?;
    let x = gm.x_sub(&idx);
    let cert = crate::grid::check_positive_definite(&x)?;
    if !cert.pd {
        return Err(GridError::NotPositiveDefinite { min_eig: cert.min_eig }.into());
    }
    let x_inv = x.clone().try_inverse().ok_or(GridError::NotPositiveDefinite {
        min_eig: cert.min_eig,
    })?;
    let x_inv = 0.5 * (&x_inv + x_inv.transpose());
    Ok(Prepared {
        x,
        x_inv,
        s_min: bounds.iter().map(|b| b.0).collect(),
        s_max: bounds.iter().map(|b| b.1).collect(),
    })
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(f64::INFINITY)
}

/// Exact `dt_max = 2 / lambda_max(S^1/2 X S^1/2)` for `S = diag(s)`.
fn exact_dt_max(x: &DMatrix<f64>, s: &[f64], numerator: f64) -> f64 {
    let n = s.len();
    let root = DMatrix::from_diagonal(&DVector::from_iterator(n, s.iter().map(|v| v.max(0.0).sqrt())));
    let m = &root * x * &root;
    let top = sym_eigenvalues(&m).last().copied().unwrap_or(0.0);
    if top > 0.0 {
        numerator / top
    } else {
        f64::INFINITY
    }
}

fn upper_margin(p: &Prepared, factor: f64) -> f64 {
    let m = factor * &p.x_inv - DMatrix::from_diagonal(&DVector::from_vec(p.s_max.clone()));
    min_eig(&m)
}

/// Asymptotic certificate: `(2/dt) X^-1 - diag(s_max) > 0` and every
/// out-of-band slope at least `SLOPE_FLOOR`.
pub fn certify(
    gm: &GridMatrices,
    net: &RadialNetwork,
    ctrl: &dyn Controller,
    dt: f64,
) -> Result<StabilityCertificate, LyapunovError> {
    let p = prepare(gm, net, ctrl, dt)?;
    let min_eig_upper = upper_margin(&p, 2.0 / dt);
    let strict = p.s_min.iter().all(|&s| s >= SLOPE_FLOOR);
    let dt_max = exact_dt_max(&p.x, &p.s_max, 2.0);
    Ok(StabilityCertificate {
        passed: min_eig_upper > EIG_TOL && strict,
        mode: CertificateMode::Asymptotic,
        dt,
        min_eig_upper,
        min_eig_lower: None,
        strict_negativity: strict,
        slope_floor: SLOPE_FLOOR,
        dt_max,
        min_control_rate: 1.0 / dt_max,
        per_bus_slopes: p.s_max,
        per_bus_min_slopes: p.s_min,
    })
}

/// Two-sided rate coefficients `(a, b)` with
/// `(a / dt) X^-1 < diag(g') < (b / dt) X^-1` required for exponential decay.
pub fn exponential_factors(c: f64) -> Result<(f64, f64), LyapunovError> {
    if !(c > 0.0 && c < 1.0) {
        return Err(LyapunovError::BadRate(c));
    }
    let r = (1.0 - c).sqrt();
    Ok((1.0 - r, 1.0 + r))
}

pub fn certify_exponential(
    gm: &GridMatrices,
    net: &RadialNetwork,
    ctrl: &dyn Controller,
    dt: f64,
    c: f64,
) -> Result<StabilityCertificate, LyapunovError> {
    let (a, b) = exponential_factors(c)?;
    let p = prepare(gm, net, ctrl, dt)?;
    let min_eig_upper = upper_margin(&p, b / dt);
    let lower = DMatrix::from_diagonal(&DVector::from_vec(p.s_min.clone())) - (a / dt) * &p.x_inv;
    let min_eig_lower = min_eig(&lower);
    let strict = p.s_min.iter().all(|&s| s >= SLOPE_FLOOR);
    let dt_max = exact_dt_max(&p.x, &p.s_max, b);
    Ok(StabilityCertificate {
        passed: min_eig_upper > EIG_TOL && min_eig_lower > EIG_TOL && strict,
        mode: CertificateMode::Exponential { c },
        dt,
        min_eig_upper,
        min_eig_lower: Some(min_eig_lower),
        strict_negativity: strict,
        slope_floor: SLOPE_FLOOR,
        dt_max,
        min_control_rate: 1.0 / dt_max,
        per_bus_slopes: p.s_max,
        per_bus_min_slopes: p.s_min,
    })
}

/// Per-channel slope ceiling `kappa * 2 / (dt lambda_max(X))`. A policy
/// whose slopes all stay below it passes [`certify`] for any `kappa < 1`.
pub fn slope_ceiling(gm: &GridMatrices, net: &RadialNetwork, dt: f64, kappa: f64) -> f64 {
    let x = gm.x_sub(&net.controlled_indices());
    let top = sym_eigenvalues(&x).last().copied().unwrap_or(1.0);
    kappa * 2.0 / (dt * top)
}

/// Slope floor needed by the exponential lower inequality when slopes are
/// uniform: `(a / dt) / lambda_min(X)`.
pub fn exponential_slope_floor(gm: &GridMatrices, net: &RadialNetwork, dt: f64, c: f64) -> Result<f64, LyapunovError> {
    let (a, _) = exponential_factors(c)?;
    let x = gm.x_sub(&net.controlled_indices());
    let low = sym_eigenvalues(&x).first().copied().unwrap_or(1.0);
    Ok(a / (dt * low))
}

/// `V(v) = dt^2 g(v)^T X g(v)` over the controlled entries.
pub fn lyapunov_value(
    gm: &GridMatrices,
    net: &RadialNetwork,
    ctrl: &dyn Controller,
    v: &DVector<f64>,
    dt: f64,
) -> f64 {
    let idx = net.controlled_indices();
    let x = gm.x_sub(&idx);
    lyapunov_value_with(&x, ctrl, v, &idx, dt)
}

fn lyapunov_value_with(x: &DMatrix<f64>, ctrl: &dyn Controller, v: &DVector<f64>, idx: &[usize], dt: f64) -> f64 {
    let g = DVector::from_iterator(idx.len(), idx.iter().enumerate().map(|(k, &i)| -ctrl.act(k, v[i])));
    dt * dt * g.dot(&(x * &g))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecreaseOptions {
    pub horizon: usize,
    /// Distance to the safe set counted as converged.
    pub tol: f64,
}

impl Default for DecreaseOptions {
    fn default() -> Self {
        DecreaseOptions {
            horizon: 10_000,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecreaseReport {
    /// `V` fell strictly at every step taken from outside the safe set.
    pub monotone: bool,
    pub trace: Vec<f64>,
    pub reached_sv: bool,
    /// First step at which every controlled entry is inside its band.
    pub steps_to_sv: Option<usize>,
    /// First step at which the distance to the safe set fell below `tol`.
    pub steps_to_tol: Option<usize>,
    pub final_distance: f64,
    /// Set when an advisory run stopped on an environment error.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

/// Simulates `v <- v + dt X u(v)` (full linearized dynamics) and checks that
/// `V` decreases strictly until the safe set is reached or the distance to it
/// drops below `opts.tol`.
pub fn verify_decrease(
    gm: &GridMatrices,
    net: &RadialNetwork,
    ctrl: &dyn Controller,
    v0: &DVector<f64>,
    dt: f64,
    opts: &DecreaseOptions,
) -> DecreaseReport {
    let idx = net.controlled_indices();
    let limits = net.state_limits();
    let x_cc = gm.x_sub(&idx);
    let mut v = v0.clone();
    let mut run = Tracker::default();
    for t in 0..=opts.horizon {
        let value = lyapunov_value_with(&x_cc, ctrl, &v, &idx, dt);
        let dist = band_distance(&v, &idx, &limits);
        if run.observe(t, value, dist, opts.tol) || t == opts.horizon {
            break;
        }
        let u = ctrl.actions(&v, &idx);
        v += dt * (&gm.x * u);
    }
    run.finish(None)
}

/// Advisory counterpart on an arbitrary environment (e.g. the nonlinear
/// branch flow). Reports, does not assert.
pub fn verify_decrease_env(
    env: &mut VoltageEnv<'_>,
    gm: &GridMatrices,
    ctrl: &dyn Controller,
    p: &DVector<f64>,
    q0: &DVector<f64>,
    opts: &DecreaseOptions,
) -> DecreaseReport {
    let idx = env.controlled().to_vec();
    let x_cc = gm.x_sub(&idx);
    let dt = env.dt();
    let mut run = Tracker::default();
    if let Err(e) = env.reset(p, q0) {
        return run.finish(Some(e));
    }
    for t in 0..=opts.horizon {
        let v = env.state().v.clone();
        let value = lyapunov_value_with(&x_cc, ctrl, &v, &idx, dt);
        if run.observe(t, value, env.band_distance(), opts.tol) || t == opts.horizon {
            break;
        }
        let u = ctrl.actions(&v, &idx);
        if let Err(e) = env.step(&u) {
            return run.finish(Some(e));
        }
    }
    run.finish(None)
}

#[derive(Default)]
struct Tracker {
    monotone: bool,
    started: bool,
    trace: Vec<f64>,
    steps_to_sv: Option<usize>,
    steps_to_tol: Option<usize>,
    last_dist: f64,
    prev_outside: bool,
}

impl Tracker {
    /// Records step `t`; returns true once the run can stop.
    fn observe(&mut self, t: usize, value: f64, dist: f64, tol: f64) -> bool {
        if !self.started {
            self.started = true;
            self.monotone = true;
        } else if self.prev_outside && !(value < *self.trace.last().unwrap()) {
            self.monotone = false;
        }
        self.trace.push(value);
        self.last_dist = dist;
        self.prev_outside = dist > 0.0;
        if dist <= tol && self.steps_to_tol.is_none() {
            self.steps_to_tol = Some(t);
        }
        if dist == 0.0 {
            self.steps_to_sv = Some(t);
            return true;
        }
        self.steps_to_tol.is_some()
    }

    fn finish(self, err: Option<EnvError>) -> DecreaseReport {
        DecreaseReport {
            monotone: self.monotone && err.is_none(),
            trace: self.trace,
            reached_sv: self.steps_to_sv.is_some(),
            steps_to_sv: self.steps_to_sv,
            steps_to_tol: self.steps_to_tol,
            final_distance: self.last_dist,
            aborted: err.map(|e| e.to_string()),
        }
    }
}
