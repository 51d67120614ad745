//! Closed-loop voltage environment shared by training, certification checks
//! and evaluation.
//!
//! Active injections `p` are held fixed for an episode. Each step applies the
//! reactive adjustment `q <- q + dt u` and produces the next voltage profile,
//! either from the linearized dynamics `v <- v + dt X u` or by re-solving the
//! nonlinear branch flow at the new injections.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{step_dynamics, BusLimits, GridError, GridMatrices, RadialNetwork, StateIndex, VoltageState};
use crate::powerflow::{self, FlowError, FlowOptions};

/// A voltage above this multiple of `v0` (or at or below zero) ends an episode.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvMode {
    Linear,
    Nonlinear,
}

impl std::fmt::Display for EnvMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnvMode::Linear => "linear",
            EnvMode::Nonlinear => "nonlinear",
        })
    }
}

impl std::str::FromStr for EnvMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(EnvMode::Linear),
            "nonlinear" => Ok(EnvMode::Nonlinear),
            other => Err(format!("unknown environment mode '{other}' (linear|nonlinear)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("voltage diverged at {at} (v = {v})")]
    Diverged { at: StateIndex, v: f64 },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// `eta1 * dev^2 + eta2 |u|`, with `dev` the signed band violation.
pub fn stage_cost(v: f64, u: f64, band: BusLimits, eta1: f64, eta2: f64) -> f64 {
    let dev = band.violation(v);
    eta1 * dev * dev + eta2 * u.abs()
}

pub struct VoltageEnv<'a> {
    net: &'a RadialNetwork,
    gm: &'a GridMatrices,
    mode: EnvMode,
    dt: f64,
    flow: FlowOptions,
    controlled: Vec<usize>,
    limits: Vec<BusLimits>,
    p: DVector<f64>,
    state: VoltageState,
}

impl<'a> VoltageEnv<'a> {
    pub fn new(net: &'a RadialNetwork, gm: &'a GridMatrices, mode: EnvMode, dt: f64) -> Self {
        let n = net.state_dim();
        VoltageEnv {
            net,
            gm,
            mode,
            dt,
            flow: FlowOptions::default(),
            controlled: net.controlled_indices(),
            limits: net.state_limits(),
            p: DVector::zeros(n),
            state: VoltageState {
                v: DVector::from_element(n, net.v0()),
                q: DVector::zeros(n),
                t: 0,
            },
        }
    }

    pub fn with_flow_options(mut self, flow: FlowOptions) -> Self {
        self.flow = flow;
        self
    }

    pub fn mode(&self) -> EnvMode {
        self.mode
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn controlled(&self) -> &[usize] {
        &self.controlled
    }

    pub fn controlled_limits(&self) -> Vec<BusLimits> {
        self.controlled.iter().map(|&i| self.limits[i]).collect()
    }

    pub fn state(&self) -> &VoltageState {
        &self.state
    }

    fn voltage(&self, q: &DVector<f64>) -> Result<DVector<f64>, EnvError> {
        match self.mode {
            EnvMode::Linear => Ok(crate::grid::lindistflow_voltage(self.gm, &self.p, q, self.net.v0())?),
            EnvMode::Nonlinear => Ok(powerflow::solve(self.net, &self.p, q, &self.flow)?.v),
        }
    }

    fn check(&self, v: &DVector<f64>) -> Result<(), EnvError> {
        let ordering = || self.net.state_ordering();
        for (i, &x) in v.iter().enumerate() {
            if !(x > 0.0 && x <= DIVERGENCE_FACTOR * self.net.v0()) {
                return Err(EnvError::Diverged {
                    at: ordering()[i],
                    v: x,
                });
            }
        }
        Ok(())
    }

    /// Starts an episode at injections `(p, q0)`.
    pub fn reset(&mut self, p: &DVector<f64>, q0: &DVector<f64>) -> Result<&VoltageState, EnvError> {
        self.p = p.clone();
        let v = self.voltage(q0)?;
        self.check(&v)?;
        self.state = VoltageState { v, q: q0.clone(), t: 0 };
        Ok(&self.state)
    }

    pub fn step(&mut self, u: &DVector<f64>) -> Result<&VoltageState, EnvError> {
        let next = match self.mode {
            EnvMode::Linear => step_dynamics(self.gm, &self.state, u, self.dt)?,
            EnvMode::Nonlinear => {
                let q = &self.state.q + self.dt * u;
                VoltageState {
                    v: self.voltage(&q)?,
                    q,
                    t: self.state.t + 1,
                }
            }
        };
        self.check(&next.v)?;
        self.state = next;
        Ok(&self.state)
    }

    pub fn controlled_v(&self) -> Vec<f64> {
        self.controlled.iter().map(|&i| self.state.v[i]).collect()
    }

    /// Largest band violation over controlled entries (0 inside `S_v`).
    pub fn band_distance(&self) -> f64 {
        band_distance(&self.state.v, &self.controlled, &self.limits)
    }

    pub fn in_band(&self) -> bool {
        self.band_distance() == 0.0
    }
}

pub fn band_distance(v: &DVector<f64>, controlled: &[usize], limits: &[BusLimits]) -> f64 {
    controlled
        .iter()
        .map(|&i| limits[i].violation(v[i]).abs())
        .fold(0.0, f64::max)
}
