//! Radial feeder model and the linearized (LinDistFlow) voltage sensitivities.
//!
//! A [`RadialNetwork`] is a tree rooted at the substation (bus 0). From it we
//! build dense sensitivity matrices `R` and `X` such that, with losses
//! neglected, squared voltage magnitudes obey
//!
//! ```text
//! v = R p + X q + v0 1 = X q + v_env
//! ```
//!
//! State vectors never include the substation. Single-phase networks order
//! the state by bus (`bus k` at index `k - 1`); three-phase networks are
//! bus-major with three consecutive phase entries per bus.

mod file;
mod threephase;

pub use file::{load_network, BaseFile, BusFile, ComplexFile, LineFile, NetworkFile};
pub use threephase::{check_diagonal_dominance, hat_impedance, phase_major_permutation};
pub(crate) use threephase::alpha as threephase_alpha;

use std::collections::VecDeque;
use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance used when a matrix is required to be symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("bus {0} is listed more than once")]
    DuplicateBus(BusId),
    #[error("bus ids must be 0..={max} without gaps; bus {missing} is missing")]
    MissingBus { missing: BusId, max: usize },
    #[error("line {line} references unknown bus {bus}")]
    UnknownBus { line: usize, bus: BusId },
    #[error("line {line} is a self-loop at bus {bus}")]
    SelfLoop { line: usize, bus: BusId },
    #[error("edge set contains a cycle: {}", cycle_text(.0))]
    Cycle(Vec<BusId>),
    #[error("bus {0} is not connected to the substation")]
    Disconnected(BusId),
    #[error("line {line}: {reason}")]
    BadImpedance { line: usize, reason: String },
    #[error("bus {bus}: limits must satisfy v_lower < v0 < v_upper (got {lower} < {v0} < {upper})")]
    BadLimits { bus: BusId, lower: f64, upper: f64, v0: f64 },
    #[error("controlled bus {0} is not a non-root bus of the network")]
    BadControlled(BusId),
    #[error("lines mix single-phase and three-phase impedances")]
    MixedPhaseModel,
    #[error("matrix is not symmetric (max |M - M^T| = {0:e})")]
    Asymmetric(f64),
    #[error("X is not positive definite (min eigenvalue {min_eig:e})")]
    NotPositiveDefinite { min_eig: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("network file: {0}")]
    Schema(String),
    #[error("network file field `{path}`: {msg}")]
    Field { path: String, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BusId(pub usize);

impl BusId {
    pub const ROOT: BusId = BusId(0);

    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for BusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseModel {
    Single,
    Three,
}

impl PhaseModel {
    pub fn phases(self) -> usize {
        match self {
            PhaseModel::Single => 1,
            PhaseModel::Three => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Impedance {
    /// Per-unit series resistance and reactance.
    Single { r: f64, x: f64 },
    /// 3x3 phase impedance matrix `Z = R + jX`, per-unit.
    Three(Matrix3<Complex64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Line {
    pub from: BusId,
    pub to: BusId,
    pub impedance: Impedance,
}

impl Line {
    pub fn single(from: usize, to: usize, r: f64, x: f64) -> Self {
        Line {
            from: BusId(from),
            to: BusId(to),
            impedance: Impedance::Single { r, x },
        }
    }

    pub fn three(from: usize, to: usize, z: Matrix3<Complex64>) -> Self {
        Line {
            from: BusId(from),
            to: BusId(to),
            impedance: Impedance::Three(z),
        }
    }

    pub fn rx(&self) -> Option<(f64, f64)> {
        match self.impedance {
            Impedance::Single { r, x } => Some((r, x)),
            Impedance::Three(_) => None,
        }
    }

    pub fn z_matrix(&self) -> Option<&Matrix3<Complex64>> {
        match &self.impedance {
            Impedance::Three(z) => Some(z),
            Impedance::Single { .. } => None,
        }
    }
}

/// Squared-magnitude band `[lower, upper]` for one bus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BusLimits {
    pub lower: f64,
    pub upper: f64,
}

impl BusLimits {
    pub fn new(lower: f64, upper: f64) -> Self {
        BusLimits { lower, upper }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lower && v <= self.upper
    }

    /// Signed band violation: positive above, negative below, zero inside.
    pub fn violation(&self, v: f64) -> f64 {
        (v - self.upper).max(0.0) + (v - self.lower).min(0.0)
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }
}

/// System base used to convert physical quantities to per-unit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Base {
    pub s_mva: f64,
    pub v_kv: f64,
}

impl Default for Base {
    fn default() -> Self {
        Base {
            s_mva: 1.0,
            v_kv: 4.16,
        }
    }
}

/// One entry of the state vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateIndex {
    pub bus: BusId,
    /// Phase 0/1/2 (a/b/c) for three-phase networks.
    pub phase: Option<u8>,
}

impl fmt::Display for StateIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.phase {
            None => write!(f, "{}", self.bus),
            Some(p) => write!(f, "{}{}", self.bus, ['a', 'b', 'c'][p as usize]),
        }
    }
}

/// Tree-shaped feeder. Lines are stored oriented parent -> child.
#[derive(Clone, Debug)]
pub struct RadialNetwork {
    lines: Vec<Line>,
    v0: f64,
    limits: Vec<BusLimits>,
    controlled: Vec<BusId>,
    phase_model: PhaseModel,
    base: Base,
    /// `parent_line[b]` is the index of the line feeding bus `b` (None for the root).
    parent_line: Vec<Option<usize>>,
    /// Buses in breadth-first order from the root.
    order: Vec<BusId>,
}

impl RadialNetwork {
    /// Validates topology, impedances and limits. `limits` is indexed by bus id
    /// (entry 0, the substation, is ignored).
    pub fn new(
        n_buses: usize,
        lines: Vec<Line>,
        v0: f64,
        limits: Vec<BusLimits>,
        controlled: Vec<BusId>,
    ) -> Result<Self, GridError> {
        Self::with_base(n_buses, lines, v0, limits, controlled, Base::default())
    }

    pub fn with_base(
        n_buses: usize,
        lines: Vec<Line>,
        v0: f64,
        limits: Vec<BusLimits>,
        mut controlled: Vec<BusId>,
        base: Base,
    ) -> Result<Self, GridError> {
        let phase_model = match lines.first().map(|l| &l.impedance) {
            Some(Impedance::Three(_)) => PhaseModel::Three,
            _ => PhaseModel::Single,
        };
        for (k, line) in lines.iter().enumerate() {
            check_impedance(k, line, phase_model)?;
        }
        let tree = TreeStructure::build(n_buses, &lines)?;
        let mut lines = lines;
        for (k, line) in lines.iter_mut().enumerate() {
            if tree.parent_line[line.to.0] != Some(k) {
                std::mem::swap(&mut line.from, &mut line.to);
            }
        }
        if limits.len() != n_buses {
            return Err(GridError::Dimension {
                expected: n_buses,
                got: limits.len(),
            });
        }
        for (b, lim) in limits.iter().enumerate().skip(1) {
            if !(lim.lower < v0 && v0 < lim.upper) {
                return Err(GridError::BadLimits {
                    bus: BusId(b),
                    lower: lim.lower,
                    upper: lim.upper,
                    v0,
                });
            }
        }
        controlled.sort();
        controlled.dedup();
        for &c in &controlled {
            if c.0 == 0 || c.0 >= n_buses {
                return Err(GridError::BadControlled(c));
            }
        }
        Ok(RadialNetwork {
            lines,
            v0,
            limits,
            controlled,
            phase_model,
            base,
            parent_line: tree.parent_line,
            order: tree.order,
        })
    }

    /// Number of buses including the substation.
    pub fn n_buses(&self) -> usize {
        self.parent_line.len()
    }

    pub fn buses(&self) -> impl Iterator<Item = BusId> {
        (0..self.n_buses()).map(BusId)
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn v0(&self) -> f64 {
        self.v0
    }

    pub fn base(&self) -> Base {
        self.base
    }

    pub fn phase_model(&self) -> PhaseModel {
        self.phase_model
    }

    pub fn limits(&self, bus: BusId) -> BusLimits {
        self.limits[bus.0]
    }

    pub fn controlled(&self) -> &[BusId] {
        &self.controlled
    }

    pub fn parent_line(&self, bus: BusId) -> Option<usize> {
        self.parent_line[bus.0]
    }

    pub fn parent(&self, bus: BusId) -> Option<BusId> {
        self.parent_line[bus.0].map(|l| self.lines[l].from)
    }

    /// Breadth-first order starting at the root.
    pub fn bfs_order(&self) -> &[BusId] {
        &self.order
    }

    /// Length of state vectors (non-root buses times phases).
    pub fn state_dim(&self) -> usize {
        (self.n_buses() - 1) * self.phase_model.phases()
    }

    pub fn state_ordering(&self) -> Vec<StateIndex> {
        let phases = self.phase_model.phases();
        (1..self.n_buses())
            .flat_map(|b| {
                (0..phases).map(move |p| StateIndex {
                    bus: BusId(b),
                    phase: (phases == 3).then_some(p as u8),
                })
            })
            .collect()
    }

    /// State-vector positions belonging to `bus`.
    pub fn state_indices(&self, bus: BusId) -> std::ops::Range<usize> {
        let phases = self.phase_model.phases();
        let start = (bus.0 - 1) * phases;
        start..start + phases
    }

    /// State positions of every controlled bus, in controlled-bus order.
    pub fn controlled_indices(&self) -> Vec<usize> {
        self.controlled
            .iter()
            .flat_map(|&b| self.state_indices(b))
            .collect()
    }

    /// Per-state-entry band limits.
    pub fn state_limits(&self) -> Vec<BusLimits> {
        self.state_ordering()
            .iter()
            .map(|s| self.limits[s.bus.0])
            .collect()
    }

    /// Children of every bus, derived from the oriented lines.
    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut ch = vec![Vec::new(); self.n_buses()];
        for (k, l) in self.lines.iter().enumerate() {
            ch[l.from.0].push(k);
        }
        ch
    }
}

fn check_impedance(k: usize, line: &Line, model: PhaseModel) -> Result<(), GridError> {
    match (&line.impedance, model) {
        (Impedance::Single { r, x }, PhaseModel::Single) => {
            if !(*r > 0.0 && *x > 0.0 && r.is_finite() && x.is_finite()) {
                return Err(GridError::BadImpedance {
                    line: k,
                    reason: format!("r and x must be positive and finite (r={r}, x={x})"),
                });
            }
        }
        (Impedance::Three(z), PhaseModel::Three) => {
            for i in 0..3 {
                if !(z[(i, i)].re > 0.0) {
                    return Err(GridError::BadImpedance {
                        line: k,
                        reason: format!("diagonal resistance of phase {i} must be positive"),
                    });
                }
                for j in 0..3 {
                    if (z[(i, j)] - z[(j, i)]).norm() > SYMMETRY_TOL * (1.0 + z[(i, j)].norm()) {
                        return Err(GridError::BadImpedance {
                            line: k,
                            reason: "phase impedance matrix must be symmetric".into(),
                        });
                    }
                }
            }
        }
        _ => return Err(GridError::MixedPhaseModel),
    }
    Ok(())
}

struct TreeStructure {
    parent_line: Vec<Option<usize>>,
    order: Vec<BusId>,
}

impl TreeStructure {
    fn build(n_buses: usize, lines: &[Line]) -> Result<Self, GridError> {
        let mut adj = vec![Vec::new(); n_buses];
        for (k, l) in lines.iter().enumerate() {
            for b in [l.from, l.to] {
                if b.0 >= n_buses {
                    return Err(GridError::UnknownBus { line: k, bus: b });
                }
            }
            if l.from == l.to {
                return Err(GridError::SelfLoop { line: k, bus: l.from });
            }
            adj[l.from.0].push((l.to.0, k));
            adj[l.to.0].push((l.from.0, k));
        }
        let mut parent_line = vec![None; n_buses];
        let mut seen = vec![false; n_buses];
        let mut order = Vec::with_capacity(n_buses);
        let mut queue = VecDeque::from([0usize]);
        if n_buses > 0 {
            seen[0] = true;
        }
        while let Some(b) = queue.pop_front() {
            order.push(BusId(b));
            for &(nb, k) in &adj[b] {
                if parent_line[b] == Some(k) {
                    continue;
                }
                if seen[nb] {
                    return Err(GridError::Cycle(close_cycle(lines, &parent_line, b, nb)));
                }
                seen[nb] = true;
                parent_line[nb] = Some(k);
                queue.push_back(nb);
            }
        }
        if let Some(b) = seen.iter().position(|s| !s) {
            return Err(GridError::Disconnected(BusId(b)));
        }
        Ok(TreeStructure { parent_line, order })
    }
}

fn cycle_text(buses: &[BusId]) -> String {
    let mut parts: Vec<String> = buses.iter().map(|b| b.to_string()).collect();
    if let Some(first) = parts.first().cloned() {
        parts.push(first);
    }
    parts.join(" -> ")
}

/// Buses on the cycle closed by an edge between already-reached `a` and `b`:
/// `a` up to the common ancestor, then down to `b`.
fn close_cycle(lines: &[Line], parent_line: &[Option<usize>], a: usize, b: usize) -> Vec<BusId> {
    let up = |mut x: usize| {
        let mut chain = vec![x];
        while let Some(k) = parent_line[x] {
            let l = &lines[k];
            x = if l.to.0 == x { l.from.0 } else { l.to.0 };
            chain.push(x);
        }
        chain
    };
    let (ca, cb) = (up(a), up(b));
    let lca = *ca.iter().find(|x| cb.contains(x)).unwrap_or(&0);
    let mut cycle: Vec<BusId> = ca.iter().take_while(|&&x| x != lca).map(|&x| BusId(x)).collect();
    cycle.push(BusId(lca));
    let tail: Vec<BusId> = cb.iter().take_while(|&&x| x != lca).map(|&x| BusId(x)).collect();
    cycle.extend(tail.into_iter().rev());
    cycle
}

/// Lines on the unique root-to-bus path, indexed by bus id, ordered from the root.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSets {
    paths: Vec<Vec<usize>>,
}

impl PathSets {
    pub fn path(&self, bus: BusId) -> &[usize] {
        &self.paths[bus.0]
    }

    /// Lines shared by the paths to `a` and `b`.
    pub fn common(&self, a: BusId, b: BusId) -> &[usize] {
        let (pa, pb) = (self.path(a), self.path(b));
        let k = pa.iter().zip(pb).take_while(|(x, y)| x == y).count();
        &pa[..k]
    }
}

pub fn build_path_sets(net: &RadialNetwork) -> PathSets {
    let mut paths: Vec<Vec<usize>> = vec![Vec::new(); net.n_buses()];
    for &b in net.bfs_order().iter().skip(1) {
        let k = net.parent_line(b).expect("non-root bus has a parent");
        let mut p = paths[net.lines[k].from.0].clone();
        p.push(k);
        paths[b.0] = p;
    }
    PathSets { paths }
}

/// Result of a positive-definiteness test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdCertificate {
    pub pd: bool,
    pub min_eig: f64,
}

pub fn symmetry_defect(m: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn check_positive_definite(m: &DMatrix<f64>) -> Result<PdCertificate, GridError> {
    if m.nrows() != m.ncols() {
        return Err(GridError::Dimension {
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    let scale = m.amax().max(1.0);
    let defect = symmetry_defect(m);
    if defect > SYMMETRY_TOL * scale {
        return Err(GridError::Asymmetric(defect));
    }
    let min_eig = sym_eigenvalues(m).iter().copied().fold(f64::INFINITY, f64::min);
    Ok(PdCertificate {
        pd: min_eig > 0.0,
        min_eig,
    })
}

/// Eigenvalues of the symmetrized matrix, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let sym = 0.5 * (m + m.transpose());
    let mut ev: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// LinDistFlow sensitivities shared by the controller, the certifier and the
/// linear environment.
#[derive(Clone, Debug)]
pub struct GridMatrices {
    pub r: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub x_inv: DMatrix<f64>,
    pub ordering: Vec<StateIndex>,
    pub certificate: PdCertificate,
}

impl GridMatrices {
    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    /// Symmetric part of `X`. Equal to `X` for single-phase networks; the
    /// three-phase sensitivity carries an antisymmetric resistive term that
    /// does not contribute to quadratic forms.
    pub fn x_sym(&self) -> DMatrix<f64> {
        0.5 * (&self.x + self.x.transpose())
    }

    /// Principal submatrix of `X` (symmetric part) on the given state indices.
    pub fn x_sub(&self, idx: &[usize]) -> DMatrix<f64> {
        let xs = self.x_sym();
        DMatrix::from_fn(idx.len(), idx.len(), |i, j| xs[(idx[i], idx[j])])
    }

    pub fn v_env(&self, p: &DVector<f64>, v0: f64) -> Result<DVector<f64>, GridError> {
        self.check_dim(p.len())?;
        Ok(&self.r * p + DVector::from_element(self.dim(), v0))
    }

    fn check_dim(&self, got: usize) -> Result<(), GridError> {
        if got != self.dim() {
            return Err(GridError::Dimension {
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }
}

pub fn build_rx_matrices(net: &RadialNetwork) -> Result<GridMatrices, GridError> {
    let m = net.state_dim();
    let phases = net.phase_model().phases();
    let mut r = DMatrix::zeros(m, m);
    let mut x = DMatrix::zeros(m, m);
    let subtree = subtrees(net);
    for line in net.lines() {
        let (rb, xb) = line_blocks(line);
        let members = &subtree[line.to.0];
        for &i in members {
            for &j in members {
                for a in 0..phases {
                    for b in 0..phases {
                        let (ii, jj) = ((i - 1) * phases + a, (j - 1) * phases + b);
                        r[(ii, jj)] += rb[(a, b)];
                        x[(ii, jj)] += xb[(a, b)];
                    }
                }
            }
        }
    }
    let x_sym = 0.5 * (&x + x.transpose());
    let certificate = check_positive_definite(&x_sym)?;
    if !certificate.pd {
        return Err(GridError::NotPositiveDefinite {
            min_eig: certificate.min_eig,
        });
    }
    let x_inv = x.clone().try_inverse().ok_or(GridError::NotPositiveDefinite {
        min_eig: certificate.min_eig,
    })?;
    Ok(GridMatrices {
        r,
        x,
        x_inv,
        ordering: net.state_ordering(),
        certificate,
    })
}

/// Per-line contributions to R and X: `2 r`, `2 x` (single-phase) or
/// `2 Re(Zhat)^T`, `2 Im(Zhat)^T` (three-phase).
fn line_blocks(line: &Line) -> (DMatrix<f64>, DMatrix<f64>) {
    match &line.impedance {
        Impedance::Single { r, x } => (
            DMatrix::from_element(1, 1, 2.0 * r),
            DMatrix::from_element(1, 1, 2.0 * x),
        ),
        Impedance::Three(z) => {
            let zh = hat_impedance(z);
            (
                DMatrix::from_fn(3, 3, |a, b| 2.0 * zh[(b, a)].re),
                DMatrix::from_fn(3, 3, |a, b| 2.0 * zh[(b, a)].im),
            )
        }
    }
}

/// Buses in the subtree rooted at each bus (inclusive).
fn subtrees(net: &RadialNetwork) -> Vec<Vec<usize>> {
    let mut sub: Vec<Vec<usize>> = (0..net.n_buses()).map(|b| vec![b]).collect();
    for &b in net.bfs_order().iter().rev() {
        if let Some(p) = net.parent(b) {
            let child = std::mem::take(&mut sub[b.0]);
            sub[p.0].extend_from_slice(&child);
            sub[b.0] = child;
        }
    }
    sub
}

/// `v = R p + X q + v0 1`.
pub fn lindistflow_voltage(
    gm: &GridMatrices,
    p: &DVector<f64>,
    q: &DVector<f64>,
    v0: f64,
) -> Result<DVector<f64>, GridError> {
    gm.check_dim(q.len())?;
    Ok(gm.v_env(p, v0)? + &gm.x * q)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoltageState {
    pub v: DVector<f64>,
    pub q: DVector<f64>,
    pub t: usize,
}

/// One zero-order-hold step of `v(t+1) = v(t) + dt X u(t)`. The reactive
/// injection integrates the same input, `q(t+1) = q(t) + dt u(t)`, so the
/// state stays on `v = X q + v_env`.
pub fn step_dynamics(
    gm: &GridMatrices,
    s: &VoltageState,
    u: &DVector<f64>,
    dt: f64,
) -> Result<VoltageState, GridError> {
    gm.check_dim(u.len())?;
    Ok(VoltageState {
        v: &s.v + dt * (&gm.x * u),
        q: &s.q + dt * u,
        t: s.t + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::assert_close;

    mod approx_eq {
        macro_rules! assert_close {
            ($a:expr, $b:expr, $tol:expr) => {{
                let (a, b): (f64, f64) = ($a, $b);
                assert!((a - b).abs() <= $tol, "{a} vs {b} (tol {})", $tol);
            }};
        }
        pub(crate) use assert_close;
    }

    fn band(n: usize) -> Vec<BusLimits> {
        vec![BusLimits::new(0.95, 1.05); n]
    }

    fn chain() -> RadialNetwork {
        RadialNetwork::new(
            3,
            vec![Line::single(0, 1, 0.05, 0.1), Line::single(1, 2, 0.1, 0.2)],
            1.0,
            band(3),
            vec![BusId(1), BusId(2)],
        )
        .unwrap()
    }

    #[test]
    fn path_sets_chain_and_star() {
        let net = chain();
        let ps = build_path_sets(&net);
        assert_eq!(ps.path(BusId(2)), &[0, 1]);
        assert!(ps.path(BusId::ROOT).is_empty());

        let star = RadialNetwork::new(
            4,
            vec![
                Line::single(0, 1, 0.1, 0.1),
                Line::single(1, 2, 0.1, 0.1),
                Line::single(1, 3, 0.1, 0.1),
            ],
            1.0,
            band(4),
            vec![],
        )
        .unwrap();
        let ps = build_path_sets(&star);
        assert_eq!(ps.common(BusId(2), BusId(3)), &[0]);
    }

    #[test]
    fn reversed_line_is_reoriented() {
        let net = RadialNetwork::new(
            3,
            vec![Line::single(1, 0, 0.05, 0.1), Line::single(2, 1, 0.1, 0.2)],
            1.0,
            band(3),
            vec![],
        )
        .unwrap();
        assert_eq!(net.parent(BusId(2)), Some(BusId(1)));
        assert_eq!(net.lines()[0].from, BusId(0));
    }

    #[test]
    fn structural_errors_name_the_bus() {
        let cyc = RadialNetwork::new(
            3,
            vec![
                Line::single(0, 1, 0.1, 0.1),
                Line::single(1, 2, 0.1, 0.1),
                Line::single(2, 0, 0.1, 0.1),
            ],
            1.0,
            band(3),
            vec![],
        );
        match cyc {
            Err(e @ GridError::Cycle(_)) => {
                assert_eq!(e.to_string(), "edge set contains a cycle: 1 -> 0 -> 2 -> 1");
            }
            other => panic!("{other:?}"),
        }
        let disc = RadialNetwork::new(
            4,
            vec![Line::single(0, 1, 0.1, 0.1), Line::single(2, 3, 0.1, 0.1)],
            1.0,
            band(4),
            vec![],
        );
        match disc {
            Err(GridError::Disconnected(b)) => assert!(b == BusId(2) || b == BusId(3)),
            other => panic!("expected disconnected, got {other:?}"),
        }
        let neg = RadialNetwork::new(2, vec![Line::single(0, 1, 0.1, -0.1)], 1.0, band(2), vec![]);
        assert!(matches!(neg, Err(GridError::BadImpedance { .. })));
        let lim = RadialNetwork::new(
            2,
            vec![Line::single(0, 1, 0.1, 0.1)],
            1.0,
            vec![BusLimits::new(0.95, 1.05), BusLimits::new(1.01, 1.05)],
            vec![],
        );
        assert!(matches!(lim, Err(GridError::BadLimits { .. })));
    }

    #[test]
    fn single_line_x_is_twice_reactance() {
        let net = RadialNetwork::new(2, vec![Line::single(0, 1, 0.05, 0.1)], 1.0, band(2), vec![])
            .unwrap();
        let gm = build_rx_matrices(&net).unwrap();
        assert_close!(gm.x[(0, 0)], 0.2, 1e-15);
    }

    #[test]
    fn chain_matrices_use_common_path() {
        let gm = build_rx_matrices(&chain()).unwrap();
        let x = [[0.2, 0.2], [0.2, 0.6]];
        let r = [[0.1, 0.1], [0.1, 0.3]];
        for i in 0..2 {
            for j in 0..2 {
                assert_close!(gm.x[(i, j)], x[i][j], 1e-15);
                assert_close!(gm.r[(i, j)], r[i][j], 1e-15);
            }
        }
        let eye = &gm.x * &gm.x_inv;
        assert!((eye - DMatrix::identity(2, 2)).amax() < 1e-10);
    }

    #[test]
    fn balanced_three_phase_line_block() {
        let z = Complex64::new(0.03, 0.07);
        let zm = Matrix3::from_diagonal_element(z);
        let net = RadialNetwork::new(2, vec![Line::three(0, 1, zm)], 1.0, band(2), vec![]).unwrap();
        let gm = build_rx_matrices(&net).unwrap();
        let expect = DMatrix::<f64>::identity(3, 3) * (2.0 * z.im);
        assert!((&gm.x - expect).amax() < 1e-14);
    }

    #[test]
    fn pd_certificates() {
        let c = check_positive_definite(&DMatrix::identity(3, 3)).unwrap();
        assert!(c.pd);
        assert_close!(c.min_eig, 1.0, 1e-14);

        let m = DMatrix::from_row_slice(2, 2, &[0.2, 0.2, 0.2, 0.6]);
        let c = check_positive_definite(&m).unwrap();
        assert!(c.pd);
        assert_close!(c.min_eig, (0.8 - 0.32f64.sqrt()) / 2.0, 1e-12);
        assert_close!(c.min_eig, 0.1172, 1e-4);

        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let c = check_positive_definite(&m).unwrap();
        assert!(!c.pd);
        assert_close!(c.min_eig, -1.0, 1e-12);

        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(check_positive_definite(&m), Err(GridError::Asymmetric(_))));
    }

    #[test]
    fn lindistflow_examples() {
        let net = chain();
        let gm = build_rx_matrices(&net).unwrap();
        let zero = DVector::zeros(2);
        let v = lindistflow_voltage(&gm, &zero, &zero, 1.0).unwrap();
        assert_eq!(v, DVector::from_element(2, 1.0));

        let p = DVector::from_vec(vec![-0.1, -0.1]);
        let v = lindistflow_voltage(&gm, &p, &zero, 1.0).unwrap();
        // R p = (-0.02, -0.04)
        assert_close!(v[0], 0.98, 1e-14);
        assert_close!(v[1], 0.96, 1e-14);

        let v_env = gm.v_env(&p, 1.0).unwrap();
        let q = -(&gm.x_inv * (v_env - DVector::from_element(2, 1.0)));
        let v = lindistflow_voltage(&gm, &p, &q, 1.0).unwrap();
        assert!((v - DVector::from_element(2, 1.0)).amax() < 1e-14);

        assert!(matches!(
            lindistflow_voltage(&gm, &DVector::zeros(3), &zero, 1.0),
            Err(GridError::Dimension { .. })
        ));
    }

    #[test]
    fn step_dynamics_examples() {
        let gm = GridMatrices {
            r: DMatrix::from_element(1, 1, 0.1),
            x: DMatrix::from_element(1, 1, 0.2),
            x_inv: DMatrix::from_element(1, 1, 5.0),
            ordering: vec![StateIndex {
                bus: BusId(1),
                phase: None,
            }],
            certificate: PdCertificate {
                pd: true,
                min_eig: 0.2,
            },
        };
        let s = VoltageState {
            v: DVector::from_element(1, 1.1),
            q: DVector::zeros(1),
            t: 0,
        };
        let same = step_dynamics(&gm, &s, &DVector::zeros(1), 1.0).unwrap();
        assert_eq!(same.v, s.v);
        let next = step_dynamics(&gm, &s, &DVector::from_element(1, -0.25), 1.0).unwrap();
        assert_close!(next.v[0], 1.05, 1e-15);
        assert_eq!(next.t, 1);
        let back = step_dynamics(&gm, &next, &DVector::from_element(1, 0.25), 1.0).unwrap();
        assert_close!(back.v[0], 1.1, 1e-15);
    }

    #[test]
    fn one_step_to_target() {
        let gm = build_rx_matrices(&chain()).unwrap();
        let s = VoltageState {
            v: DVector::from_vec(vec![1.08, 0.93]),
            q: DVector::zeros(2),
            t: 0,
        };
        let target = DVector::from_vec(vec![1.0, 1.01]);
        let dt = 0.5;
        let u = -(&gm.x_inv * (&s.v - &target)) / dt;
        let next = step_dynamics(&gm, &s, &u, dt).unwrap();
        assert!((next.v - target).amax() < 1e-12);
    }
}
