//! Per-bus actors: the monotone stacked-ReLU class and an unconstrained MLP
//! used for ablations.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::buffer::Transition;
use super::critic::ActionValue;
use super::mlp::{soft_update, Adam, Mlp};
use super::RlError;
use crate::policy::{project_params, ChannelPolicy, Projection, StackedReluParams};

pub trait Actor: Clone + Send + Sync {
    /// Local action `u` at voltage `v`.
    fn action(&self, v: f64) -> f64;
    fn params(&self) -> Vec<f64>;
    /// Installs raw parameters, restoring any class constraints.
    fn set_params(&mut self, p: &[f64]);
    /// `(1/N) sum_j w_j du/dtheta (v_j)`.
    fn weighted_grad(&self, v: &[f64], w: &[f64]) -> Vec<f64>;
    /// `self <- (1 - tau) self + tau src`.
    fn soft_update(&mut self, src: &Self, tau: f64);
}

/// One policy-gradient step: descend `Q(v, mu(v))` through the actor.
pub fn actor_update<A: Actor, Q: ActionValue>(
    actor: &mut A,
    opt: &mut Adam,
    critic: &Q,
    batch: &[Transition],
) -> Result<(), RlError> {
    if batch.is_empty() {
        return Err(RlError::Config("actor update needs a nonempty batch".into()));
    }
    let v: Vec<f64> = batch.iter().map(|t| t.v).collect();
    let u: Vec<f64> = v.iter().map(|&x| actor.action(x)).collect();
    let dq = critic.dq_du(&v, &u);
    let grad = actor.weighted_grad(&v, &dq);
    if let Some(k) = grad.iter().position(|g| !g.is_finite()) {
        return Err(RlError::NonFinite(format!("actor gradient entry {k} is {}", grad[k])));
    }
    let mut p = actor.params();
    opt.step(&mut p, &grad);
    actor.set_params(&p);
    Ok(())
}

/// Monotone channel kept feasible by projection after every update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotoneActor {
    pub channel: ChannelPolicy,
    #[serde(skip, default = "Projection::default")]
    pub projection: Projection,
}

impl MonotoneActor {
    pub fn new(channel: ChannelPolicy, eps_w: f64, eps_b: f64, ceiling: Option<f64>) -> Self {
        let projection = channel.projection(eps_w, eps_b, ceiling);
        let mut a = MonotoneActor { channel, projection };
        a.channel.params = project_params(&a.channel.params, &a.projection);
        a
    }
}

impl Actor for MonotoneActor {
    fn action(&self, v: f64) -> f64 {
        self.channel.u(v)
    }

    fn params(&self) -> Vec<f64> {
        self.channel.params.to_vec()
    }

    fn set_params(&mut self, p: &[f64]) {
        let raw = StackedReluParams::from_slice(self.channel.params.d(), p);
        self.channel.params = project_params(&raw, &self.projection);
    }

    fn weighted_grad(&self, v: &[f64], w: &[f64]) -> Vec<f64> {
        let n = v.len() as f64;
        let mut acc = vec![0.0; 4 * self.channel.params.d()];
        for (&x, &wj) in v.iter().zip(w) {
            // u = -g(v - v_ref)
            let g = self.channel.params.param_grad(x - self.channel.v_ref).to_vec();
            for (a, gk) in acc.iter_mut().zip(g) {
                *a -= wj * gk / n;
            }
        }
        acc
    }

    /// Convex combination of two feasible parameter sets; stays feasible.
    fn soft_update(&mut self, src: &Self, tau: f64) {
        let mut p = self.params();
        soft_update(&mut p, &src.params(), tau);
        self.channel.params = StackedReluParams::from_slice(self.channel.params.d(), &p);
    }
}

/// Unconstrained `1 -> hidden -> 1` network on `(v - v_ref) / v_scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpActor {
    pub net: Mlp,
    pub v_ref: f64,
    pub v_scale: f64,
    pub u_scale: f64,
}

impl MlpActor {
    pub fn new<R: Rng + ?Sized>(hidden: &[usize], v_ref: f64, rng: &mut R) -> Self {
        let mut sizes = vec![1];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        MlpActor {
            net: Mlp::new(&sizes, 0.1, rng),
            v_ref,
            v_scale: 0.1,
            u_scale: 0.1,
        }
    }

    fn inputs(&self, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_iterator(1, v.len(), v.iter().map(|x| (x - self.v_ref) / self.v_scale))
    }
}

impl Actor for MlpActor {
    fn action(&self, v: f64) -> f64 {
        self.u_scale * self.net.output(&self.inputs(&[v]))[0]
    }

    fn params(&self) -> Vec<f64> {
        self.net.params.clone()
    }

    fn set_params(&mut self, p: &[f64]) {
        self.net.params.copy_from_slice(p);
    }

    fn weighted_grad(&self, v: &[f64], w: &[f64]) -> Vec<f64> {
        let n = v.len() as f64;
        let acts = self.net.forward(&self.inputs(v));
        let dy = DMatrix::from_iterator(1, w.len(), w.iter().map(|x| x * self.u_scale / n));
        self.net.backward(&acts, &dy).0
    }

    fn soft_update(&mut self, src: &Self, tau: f64) {
        self.net.soft_update(&src.net, tau);
    }
}

/// Constant action; handy as a bootstrap actor in tests.
#[cfg(test)]
#[derive(Clone, Debug)]
pub(crate) struct FixedAction(pub f64);

#[cfg(test)]
impl Actor for FixedAction {
    fn action(&self, _: f64) -> f64 {
        self.0
    }
    fn params(&self) -> Vec<f64> {
        vec![self.0]
    }
    fn set_params(&mut self, p: &[f64]) {
        self.0 = p[0];
    }
    fn weighted_grad(&self, v: &[f64], w: &[f64]) -> Vec<f64> {
        vec![w.iter().sum::<f64>() / v.len() as f64]
    }
    fn soft_update(&mut self, src: &Self, tau: f64) {
        self.0 = (1.0 - tau) * self.0 + tau * src.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{BusLimits, StateIndex};
    use crate::policy::check_feasible;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn droop(slope: f64, ceiling: f64) -> MonotoneActor {
        let band = BusLimits::new(0.95, 1.05);
        let mut params = StackedReluParams::zeros(4);
        for l in 1..4 {
            params.b_plus[l] = -0.05 - 0.02 * (l - 1) as f64;
            params.b_minus[l] = -0.05 - 0.02 * (l - 1) as f64;
        }
        params.w_plus[1] = slope;
        params.w_minus[1] = -slope;
        let ch = ChannelPolicy {
            state: StateIndex { bus: crate::grid::BusId(1), phase: None },
            params,
            v_ref: band.midpoint(),
            band,
        };
        MonotoneActor::new(ch, 1e-3, 0.0, Some(ceiling))
    }

    /// `Q = (u + k (v - v_ref))^2`: prefers the response `u = -k x`.
    struct Steeper(f64);

    impl ActionValue for Steeper {
        fn q(&self, v: &[f64], u: &[f64]) -> Vec<f64> {
            v.iter().zip(u).map(|(v, u)| (u + self.0 * (v - 1.0)).powi(2)).collect()
        }
        fn dq_du(&self, v: &[f64], u: &[f64]) -> Vec<f64> {
            v.iter().zip(u).map(|(v, u)| 2.0 * (u + self.0 * (v - 1.0))).collect()
        }
    }

    fn batch() -> Vec<Transition> {
        [0.88, 0.91, 0.93, 1.07, 1.1, 1.13]
            .iter()
            .map(|&v| Transition { v, u: 0.0, c: 0.0, v_next: v, done: false })
            .collect()
    }

    #[test]
    fn synthetic_critic_steepens_policy_until_ceiling() {
        let ceiling = 3.0;
        let mut a = droop(0.5, ceiling);
        let mut opt = Adam::new(16, 1e-2);
        let critic = Steeper(20.0);
        let mut prev = a.channel.params.max_slope();
        for _ in 0..200 {
            actor_update(&mut a, &mut opt, &critic, &batch()).unwrap();
            let s = a.channel.params.max_slope();
            assert!(s >= prev - 1e-12, "slope fell from {prev} to {s}");
            check_feasible(&a.channel.params, &a.projection).unwrap();
            prev = s;
        }
        assert!((prev - ceiling).abs() < 1e-9, "ended at {prev}");
    }

    #[test]
    fn flat_critic_leaves_params_unchanged() {
        struct Flat;
        impl ActionValue for Flat {
            fn q(&self, v: &[f64], _: &[f64]) -> Vec<f64> {
                vec![0.0; v.len()]
            }
            fn dq_du(&self, v: &[f64], _: &[f64]) -> Vec<f64> {
                vec![0.0; v.len()]
            }
        }
        let mut a = droop(0.5, 3.0);
        let before = a.clone();
        let mut opt = Adam::new(16, 1e-2);
        actor_update(&mut a, &mut opt, &Flat, &batch()).unwrap();
        assert_eq!(a, before);
    }

    #[test]
    fn monotone_gradient_matches_finite_differences() {
        let a = droop(0.7, 3.0);
        let v = [0.9, 0.97, 1.08, 1.12];
        let w = [0.3, -1.0, 0.5, 2.0];
        let g = a.weighted_grad(&v, &w);
        let p = a.params();
        let objective = |p: &[f64]| {
            let params = StackedReluParams::from_slice(4, p);
            v.iter().zip(&w).map(|(x, wj)| -wj * params.eval(x - 1.0)).sum::<f64>() / v.len() as f64
        };
        let h = 1e-7;
        for k in 0..p.len() {
            let (mut pa, mut pb) = (p.clone(), p.clone());
            pa[k] += h;
            pb[k] -= h;
            let fd = (objective(&pa) - objective(&pb)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-5, "param {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn soft_update_stays_feasible() {
        let mut target = droop(0.2, 3.0);
        let src = droop(2.5, 3.0);
        for _ in 0..100 {
            target.soft_update(&src, 0.05);
            check_feasible(&target.channel.params, &target.projection).unwrap();
        }
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = MlpActor::new(&[6, 6], 1.0, &mut rng);
        let v = [0.9, 1.02, 1.1];
        let w = [1.0, -0.5, 2.0];
        let g = a.weighted_grad(&v, &w);
        let h = 1e-6;
        let obj = |a: &MlpActor| v.iter().zip(&w).map(|(x, wj)| wj * a.action(*x)).sum::<f64>() / 3.0;
        for k in 0..a.net.n_params() {
            let (mut pa, mut pb) = (a.clone(), a.clone());
            pa.net.params[k] += h;
            pb.net.params[k] -= h;
            assert!(((obj(&pa) - obj(&pb)) / (2.0 * h) - g[k]).abs() < 1e-7);
        }
    }
}
