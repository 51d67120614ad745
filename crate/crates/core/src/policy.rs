//! Per-channel volt/var controllers.
//!
//! The learned controller is a pair of stacked-ReLU units per side,
//!
//! ```text
//! g(x) = sum_l w+_l ReLU(x + b+_l) + sum_l w-_l ReLU(-x + b-_l)
//! ```
//!
//! acting on the centered voltage `x = v - v_ref`, with `u = -g(x)`. When the
//! prefix sums of `w+` stay positive, the prefix sums of `w-` stay negative and
//! both bias vectors start at zero and never increase, `g` is nondecreasing and
//! strictly increasing away from the origin. A deadband is carved out by
//! pinning the first unit's weight to zero and the second unit's bias to the
//! band edge.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{sym_eigenvalues, BusLimits, GridError, RadialNetwork, StateIndex};

/// Default floor on every constrained prefix sum (and hence on out-of-band slopes).
pub const SLOPE_FLOOR: f64 = 1e-3;
pub const CHECKPOINT_VERSION: u32 = 1;
/// Absolute slack used by feasibility checks.
pub const FEAS_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("policy has {got} channels but the network controls {expected}")]
    ChannelCount { expected: usize, got: usize },
    #[error("channel {k} drives {got} but the network expects {expected}")]
    ChannelMismatch {
        k: usize,
        expected: StateIndex,
        got: StateIndex,
    },
    #[error("invalid parameters: {0}")]
    Invalid(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackedReluParams {
    pub w_plus: Vec<f64>,
    pub b_plus: Vec<f64>,
    pub w_minus: Vec<f64>,
    pub b_minus: Vec<f64>,
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

impl StackedReluParams {
    pub fn zeros(d: usize) -> Self {
        StackedReluParams {
            w_plus: vec![0.0; d],
            b_plus: vec![0.0; d],
            w_minus: vec![0.0; d],
            b_minus: vec![0.0; d],
        }
    }

    pub fn d(&self) -> usize {
        self.w_plus.len()
    }

    fn check_shape(&self) -> Result<(), PolicyError> {
        let d = self.d();
        if d == 0 || [self.b_plus.len(), self.w_minus.len(), self.b_minus.len()] != [d; 3] {
            return Err(PolicyError::Invalid(format!(
                "all four vectors need the same nonzero length (w_plus has {d})"
            )));
        }
        if self.iter().any(|x| !x.is_finite()) {
            return Err(PolicyError::Invalid("non-finite entry".into()));
        }
        Ok(())
    }

    fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.w_plus
            .iter()
            .chain(&self.b_plus)
            .chain(&self.w_minus)
            .chain(&self.b_minus)
            .copied()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.iter().collect()
    }

    pub fn from_slice(d: usize, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), 4 * d);
        StackedReluParams {
            w_plus: flat[..d].to_vec(),
            b_plus: flat[d..2 * d].to_vec(),
            w_minus: flat[2 * d..3 * d].to_vec(),
            b_minus: flat[3 * d..].to_vec(),
        }
    }

    pub fn xi_plus(&self, x: f64) -> f64 {
        self.w_plus
            .iter()
            .zip(&self.b_plus)
            .map(|(w, b)| w * relu(x + b))
            .sum()
    }

    pub fn xi_minus(&self, x: f64) -> f64 {
        self.w_minus
            .iter()
            .zip(&self.b_minus)
            .map(|(w, b)| w * relu(-x + b))
            .sum()
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.xi_plus(x) + self.xi_minus(x)
    }

    /// Right-derivative `g'(x+)`.
    pub fn derivative(&self, x: f64) -> f64 {
        let plus: f64 = self
            .w_plus
            .iter()
            .zip(&self.b_plus)
            .filter(|(_, b)| x + **b >= 0.0)
            .map(|(w, _)| w)
            .sum();
        let minus: f64 = self
            .w_minus
            .iter()
            .zip(&self.b_minus)
            .filter(|(_, b)| -x + **b > 0.0)
            .map(|(w, _)| w)
            .sum();
        plus - minus
    }

    /// Gradient of `g(x)` with respect to every parameter, same layout.
    pub fn param_grad(&self, x: f64) -> StackedReluParams {
        let d = self.d();
        let mut g = StackedReluParams::zeros(d);
        for l in 0..d {
            let zp = x + self.b_plus[l];
            g.w_plus[l] = relu(zp);
            g.b_plus[l] = if zp > 0.0 { self.w_plus[l] } else { 0.0 };
            let zm = -x + self.b_minus[l];
            g.w_minus[l] = relu(zm);
            g.b_minus[l] = if zm > 0.0 { self.w_minus[l] } else { 0.0 };
        }
        g
    }

    /// Slopes of `g` on the successive linear pieces to the right of the
    /// origin (prefix sums of `w+`) and to the left (negated prefix sums of `w-`).
    pub fn piece_slopes(&self) -> (Vec<f64>, Vec<f64>) {
        let prefix = |w: &[f64], sign: f64| {
            w.iter()
                .scan(0.0, |s, x| {
                    *s += sign * x;
                    Some(*s)
                })
                .collect()
        };
        (prefix(&self.w_plus, 1.0), prefix(&self.w_minus, -1.0))
    }

    /// Exact supremum of `g'`.
    pub fn max_slope(&self) -> f64 {
        let (p, m) = self.piece_slopes();
        p.iter().chain(&m).copied().fold(0.0, f64::max)
    }

    /// Smallest slope on pieces from `first` on (1 skips the anchored piece).
    pub fn min_slope_from(&self, first: usize) -> f64 {
        let (p, m) = self.piece_slopes();
        p[first..]
            .iter()
            .chain(&m[first..])
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        StackedReluParams {
            w_plus: self.w_plus.iter().map(|w| w * factor).collect(),
            b_plus: self.b_plus.clone(),
            w_minus: self.w_minus.iter().map(|w| w * factor).collect(),
            b_minus: self.b_minus.clone(),
        }
    }
}

/// Deadband edges in centered units: `lower < 0 < upper`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deadband {
    pub lower: f64,
    pub upper: f64,
}

/// Feasible set used by [`project_params`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    /// Floor on every constrained prefix sum.
    pub eps_w: f64,
    /// Minimum gap between consecutive biases.
    pub eps_b: f64,
    /// Optional ceiling on every prefix sum, i.e. on the slope of `g`.
    pub ceiling: Option<f64>,
    /// Pins `w_1 = 0`, `b+_2 = -upper` and `b-_2 = lower`; prefix constraints
    /// then start at the second unit.
    pub anchor: Option<Deadband>,
}

impl Default for Projection {
    fn default() -> Self {
        Projection {
            eps_w: SLOPE_FLOOR,
            eps_b: 0.0,
            ceiling: None,
            anchor: None,
        }
    }
}

/// Forward pass clamping each constrained prefix sum into `[lo, hi]`, moving
/// only the current weight. Feasible input is returned unchanged.
/// Sums within `FEAS_TOL` of a bound count as feasible so that repeated
/// projection is exactly idempotent despite rounding in `bound - sum`.
fn project_prefix(w: &mut [f64], start: usize, lo: f64, hi: f64) {
    let mut sum: f64 = w[..start].iter().sum();
    for wl in w.iter_mut().skip(start) {
        let s = sum + *wl;
        if s < lo - FEAS_TOL {
            *wl = lo - sum;
            sum = lo;
        } else if s > hi + FEAS_TOL {
            *wl = hi - sum;
            sum = hi;
        } else {
            sum = s;
        }
    }
}

fn project_biases(b: &mut [f64], start: usize, gap: f64) {
    for l in start.max(1)..b.len() {
        b[l] = b[l].min(b[l - 1] - gap);
    }
}

/// Returns the nearest-by-forward-pass parameters satisfying the monotone
/// class constraints: constrained prefix sums of `w+` in `[eps_w, ceiling]`,
/// of `-w-` likewise, `b_1 = 0` and non-increasing biases.
pub fn project_params(p: &StackedReluParams, proj: &Projection) -> StackedReluParams {
    let mut out = p.clone();
    let d = out.d();
    let lo = proj.eps_w;
    let hi = proj.ceiling.unwrap_or(f64::INFINITY).max(lo);
    out.b_plus[0] = 0.0;
    out.b_minus[0] = 0.0;
    let start = match proj.anchor {
        Some(db) if d >= 2 => {
            out.w_plus[0] = 0.0;
            out.w_minus[0] = 0.0;
            out.b_plus[1] = -db.upper;
            out.b_minus[1] = db.lower;
            1
        }
        _ => 0,
    };
    project_prefix(&mut out.w_plus, start, lo, hi);
    for w in out.w_minus.iter_mut() {
        *w = -*w;
    }
    project_prefix(&mut out.w_minus, start, lo, hi);
    for w in out.w_minus.iter_mut() {
        *w = -*w;
    }
    project_biases(&mut out.b_plus, start + 1, proj.eps_b);
    project_biases(&mut out.b_minus, start + 1, proj.eps_b);
    out
}

/// Checks the class invariants directly. Returns the first violation.
pub fn check_feasible(p: &StackedReluParams, proj: &Projection) -> Result<(), String> {
    let start = if proj.anchor.is_some() { 1 } else { 0 };
    let tol = 2.0 * FEAS_TOL;
    let (ps, ms) = p.piece_slopes();
    for (name, sums) in [("w_plus", &ps), ("w_minus", &ms)] {
        for (l, s) in sums.iter().enumerate().skip(start) {
            if *s < proj.eps_w - tol {
                return Err(format!("{name} prefix {} = {s} below floor", l + 1));
            }
            if let Some(c) = proj.ceiling {
                if *s > c.max(proj.eps_w) + tol {
                    return Err(format!("{name} prefix {} = {s} above ceiling", l + 1));
                }
            }
        }
    }
    for (name, b) in [("b_plus", &p.b_plus), ("b_minus", &p.b_minus)] {
        if b[0].abs() > tol {
            return Err(format!("{name}[1] = {} must be 0", b[0]));
        }
        for l in 1..b.len() {
            if b[l] > b[l - 1] + tol {
                return Err(format!("{name} increases at {}", l + 1));
            }
        }
    }
    if let Some(db) = proj.anchor {
        if p.w_plus[0].abs() > tol || p.w_minus[0].abs() > tol {
            return Err("anchored first weights must be 0".into());
        }
        if p.d() >= 2
            && ((p.b_plus[1] + db.upper).abs() > tol || (p.b_minus[1] - db.lower).abs() > tol)
        {
            return Err("deadband anchor moved".into());
        }
    }
    Ok(())
}

/// Anything that maps per-channel voltages to per-channel reactive actions.
/// Channel `k` reads and drives the `k`-th controlled state entry.
pub trait Controller: Sync {
    fn n_channels(&self) -> usize;

    /// Action `u_k` for squared voltage `v` on channel `k`.
    fn act(&self, k: usize, v: f64) -> f64;

    /// Per-channel `(min, max)` of `g' = -du/dv` over the out-of-band region,
    /// when known exactly. `None` means the controller cannot be certified.
    fn slope_bounds(&self) -> Option<Vec<(f64, f64)>>;

    fn label(&self) -> String;

    /// Full action vector; uncontrolled entries are zero.
    fn actions(&self, v: &DVector<f64>, controlled: &[usize]) -> DVector<f64> {
        let mut u = DVector::zeros(v.len());
        for (k, &i) in controlled.iter().enumerate() {
            u[i] = self.act(k, v[i]);
        }
        u
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelPolicy {
    pub state: StateIndex,
    pub params: StackedReluParams,
    pub v_ref: f64,
    pub band: BusLimits,
}

impl ChannelPolicy {
    pub fn deadband(&self) -> Deadband {
        Deadband {
            lower: self.band.lower - self.v_ref,
            upper: self.band.upper - self.v_ref,
        }
    }

    pub fn projection(&self, eps_w: f64, eps_b: f64, ceiling: Option<f64>) -> Projection {
        Projection {
            eps_w,
            eps_b,
            ceiling,
            anchor: Some(self.deadband()),
        }
    }

    pub fn g(&self, v: f64) -> f64 {
        self.params.eval(v - self.v_ref)
    }

    pub fn u(&self, v: f64) -> f64 {
        -self.g(v)
    }

    /// Right-derivative `du/dv`.
    pub fn du_dv(&self, v: f64) -> f64 {
        -self.params.derivative(v - self.v_ref)
    }
}

/// Monotone policy: one anchored stacked-ReLU controller per controlled
/// state entry (one per phase on three-phase networks).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonePolicy {
    pub version: u32,
    pub channels: Vec<ChannelPolicy>,
}

/// Initial shape of a fresh policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyInit {
    pub d: usize,
    /// Slope just outside the band.
    pub slope: f64,
    /// Distance between consecutive knots beyond the band edge.
    pub knot_spacing: f64,
}

impl Default for PolicyInit {
    fn default() -> Self {
        PolicyInit {
            d: 8,
            slope: 0.5,
            knot_spacing: 0.02,
        }
    }
}

impl MonotonePolicy {
    /// Droop-shaped start: the second unit carries the whole slope and the
    /// remaining knots are spread beyond the band with zero extra weight.
    pub fn init(net: &RadialNetwork, init: &PolicyInit) -> Result<Self, PolicyError> {
        if init.d < 2 {
            return Err(PolicyError::Invalid("d must be at least 2".into()));
        }
        if !(init.slope >= SLOPE_FLOOR) || !(init.knot_spacing >= 0.0) {
            return Err(PolicyError::Invalid(format!(
                "slope must be >= {SLOPE_FLOOR} and knot spacing >= 0"
            )));
        }
        let ordering = net.state_ordering();
        let limits = net.state_limits();
        let channels = net
            .controlled_indices()
            .into_iter()
            .map(|i| {
                let band = limits[i];
                let mut ch = ChannelPolicy {
                    state: ordering[i],
                    params: StackedReluParams::zeros(init.d),
                    v_ref: band.midpoint(),
                    band,
                };
                let db = ch.deadband();
                let p = &mut ch.params;
                for l in 1..init.d {
                    let off = (l - 1) as f64 * init.knot_spacing;
                    p.b_plus[l] = -db.upper - off;
                    p.b_minus[l] = db.lower - off;
                }
                p.w_plus[1] = init.slope;
                p.w_minus[1] = -init.slope;
                ch
            })
            .collect();
        Ok(MonotonePolicy {
            version: CHECKPOINT_VERSION,
            channels,
        })
    }

    pub fn channel(&self, k: usize) -> &ChannelPolicy {
        &self.channels[k]
    }

    /// Per-channel supremum of `g'`.
    pub fn max_slope(&self) -> Vec<f64> {
        self.channels.iter().map(|c| c.params.max_slope()).collect()
    }

    /// Per-channel infimum of `g'` outside the deadband.
    pub fn min_slope(&self) -> Vec<f64> {
        self.channels
            .iter()
            .map(|c| c.params.min_slope_from(1.min(c.params.d() - 1)))
            .collect()
    }

    pub fn project(&mut self, eps_w: f64, eps_b: f64, ceilings: Option<&[f64]>) {
        for (k, ch) in self.channels.iter_mut().enumerate() {
            let proj = ch.projection(eps_w, eps_b, ceilings.map(|c| c[k]));
            ch.params = project_params(&ch.params, &proj);
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(PolicyError::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        for (k, ch) in self.channels.iter().enumerate() {
            ch.params
                .check_shape()
                .map_err(|e| PolicyError::Checkpoint(format!("channels[{k}]: {e}")))?;
            if !(ch.band.lower < ch.v_ref && ch.v_ref < ch.band.upper) {
                return Err(PolicyError::Checkpoint(format!(
                    "channels[{k}]: v_ref must lie inside the band"
                )));
            }
            let proj = ch.projection(0.0, 0.0, None);
            check_feasible(&ch.params, &proj)
                .map_err(|e| PolicyError::Checkpoint(format!("channels[{k}]: {e}")))?;
        }
        Ok(())
    }

    /// Confirms the channels line up with the network's controlled entries.
    pub fn check_network(&self, net: &RadialNetwork) -> Result<(), PolicyError> {
        let ordering = net.state_ordering();
        let idx = net.controlled_indices();
        if idx.len() != self.channels.len() {
            return Err(PolicyError::ChannelCount {
                expected: idx.len(),
                got: self.channels.len(),
            });
        }
        for (k, (&i, ch)) in idx.iter().zip(&self.channels).enumerate() {
            if ordering[i] != ch.state {
                return Err(PolicyError::ChannelMismatch {
                    k,
                    expected: ordering[i],
                    got: ch.state,
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let p: MonotonePolicy = serde_json::from_str(text)
            .map_err(|e| PolicyError::Checkpoint(format!("line {} column {}: {e}", e.line(), e.column())))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, PolicyError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PolicyError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

impl Controller for MonotonePolicy {
    fn n_channels(&self) -> usize {
        self.channels.len()
    }

    fn act(&self, k: usize, v: f64) -> f64 {
        self.channels[k].u(v)
    }

    fn slope_bounds(&self) -> Option<Vec<(f64, f64)>> {
        Some(self.min_slope().into_iter().zip(self.max_slope()).collect())
    }

    fn label(&self) -> String {
        "stable-ddpg".into()
    }
}

/// `u = -eps ([v - upper]+ - [lower - v]+)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearDroop {
    pub gains: Vec<f64>,
    pub bands: Vec<BusLimits>,
}

pub fn eval_linear_droop(gain: f64, band: BusLimits, v: f64) -> f64 {
    -gain * (relu(v - band.upper) - relu(band.lower - v))
}

impl LinearDroop {
    pub fn uniform(net: &RadialNetwork, gain: f64) -> Self {
        let limits = net.state_limits();
        let bands: Vec<_> = net.controlled_indices().iter().map(|&i| limits[i]).collect();
        LinearDroop {
            gains: vec![gain; bands.len()],
            bands,
        }
    }
}

impl Controller for LinearDroop {
    fn n_channels(&self) -> usize {
        self.gains.len()
    }

    fn act(&self, k: usize, v: f64) -> f64 {
        eval_linear_droop(self.gains[k], self.bands[k], v)
    }

    fn slope_bounds(&self) -> Option<Vec<(f64, f64)>> {
        Some(self.gains.iter().map(|&g| (g, g)).collect())
    }

    fn label(&self) -> String {
        let g = self.gains.first().copied().unwrap_or(0.0);
        if self.gains.iter().all(|&x| x == g) {
            format!("linear(eps={g:.6})")
        } else {
            "linear".into()
        }
    }
}

/// `2 sigma_min(X) / sigma_max(X)^2` for a symmetric positive definite `X`.
pub fn stability_gain_bound(x: &DMatrix<f64>) -> Result<f64, GridError> {
    let cert = crate::grid::check_positive_definite(x)?;
    if !cert.pd {
        return Err(GridError::NotPositiveDefinite {
            min_eig: cert.min_eig,
        });
    }
    let ev = sym_eigenvalues(x);
    let (lo, hi) = (ev[0], ev[ev.len() - 1]);
    Ok(2.0 * lo / (hi * hi))
}
