//! Per-bus action-value network `Q(v, u)` and its temporal-difference update.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::actor::Actor;
use super::buffer::Transition;
use super::mlp::{Adam, Mlp};
use super::RlError;

/// Anything that scores local state-action pairs (lower is better).
pub trait ActionValue {
    fn q(&self, v: &[f64], u: &[f64]) -> Vec<f64>;
    fn dq_du(&self, v: &[f64], u: &[f64]) -> Vec<f64>;
}

/// MLP critic over normalized inputs `((v - v_ref) / v_scale, u / u_scale)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Critic {
    pub net: Mlp,
    pub v_ref: f64,
    pub v_scale: f64,
    pub u_scale: f64,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(hidden: &[usize], v_ref: f64, rng: &mut R) -> Self {
        let mut sizes = vec![2];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Critic {
            net: Mlp::new(&sizes, 0.1, rng),
            v_ref,
            v_scale: 0.05,
            u_scale: 0.05,
        }
    }

    fn inputs(&self, v: &[f64], u: &[f64]) -> DMatrix<f64> {
        assert_eq!(v.len(), u.len());
        DMatrix::from_fn(2, v.len(), |r, c| {
            if r == 0 {
                (v[c] - self.v_ref) / self.v_scale
            } else {
                u[c] / self.u_scale
            }
        })
    }

    /// Mean squared error against `targets` and its parameter gradient.
    pub fn loss_grad(&self, v: &[f64], u: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
        let n = v.len() as f64;
        let acts = self.net.forward(&self.inputs(v, u));
        let y = acts.last().expect("output layer");
        let err: Vec<f64> = y.iter().zip(targets).map(|(q, t)| q - t).collect();
        let loss = err.iter().map(|e| e * e).sum::<f64>() / n;
        let dy = DMatrix::from_iterator(1, err.len(), err.iter().map(|e| 2.0 * e / n));
        let (grad, _) = self.net.backward(&acts, &dy);
        (loss, grad)
    }
}

impl ActionValue for Critic {
    fn q(&self, v: &[f64], u: &[f64]) -> Vec<f64> {
        self.net.output(&self.inputs(v, u)).iter().copied().collect()
    }

    fn dq_du(&self, v: &[f64], u: &[f64]) -> Vec<f64> {
        let acts = self.net.forward(&self.inputs(v, u));
        let ones = DMatrix::from_element(1, v.len(), 1.0);
        let (_, dx) = self.net.backward(&acts, &ones);
        dx.row(1).iter().map(|g| g / self.u_scale).collect()
    }
}

/// Bootstrapped targets `c + gamma (1 - done) Q'(v', mu'(v'))`.
pub fn td_targets<A: Actor>(target: &Critic, target_actor: &A, batch: &[Transition], gamma: f64) -> Vec<f64> {
    let vn: Vec<f64> = batch.iter().map(|t| t.v_next).collect();
    let un: Vec<f64> = vn.iter().map(|&v| target_actor.action(v)).collect();
    let qn = target.q(&vn, &un);
    batch
        .iter()
        .zip(qn)
        .map(|(t, q)| if t.done { t.c } else { t.c + gamma * q })
        .collect()
}

/// One Adam step on the squared TD error. Returns the pre-step loss.
pub fn critic_update(critic: &mut Critic, opt: &mut Adam, batch: &[Transition], targets: &[f64]) -> Result<f64, RlError> {
    if batch.is_empty() {
        return Err(RlError::Config("critic update needs a nonempty batch".into()));
    }
    let v: Vec<f64> = batch.iter().map(|t| t.v).collect();
    let u: Vec<f64> = batch.iter().map(|t| t.u).collect();
    let (loss, grad) = critic.loss_grad(&v, &u, targets);
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(RlError::NonFinite(format!(
            "critic loss {loss}; batch v range [{:.4}, {:.4}]",
            v.iter().copied().fold(f64::INFINITY, f64::min),
            v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        )));
    }
    opt.step(&mut critic.net.params, &grad);
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::stage_cost;
    use crate::grid::BusLimits;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = Critic::new(&[2], 1.0, &mut rng);
        let (v, u, y) = ([1.07], [-0.03], [0.4]);
        let (_, g) = c.loss_grad(&v, &u, &y);
        let h = 1e-6;
        for k in 0..c.net.n_params() {
            let (mut a, mut b) = (c.clone(), c.clone());
            a.net.params[k] += h;
            b.net.params[k] -= h;
            let fd = (a.loss_grad(&v, &u, &y).0 - b.loss_grad(&v, &u, &y).0) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-5, "param {k}");
        }
    }

    #[test]
    fn action_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let c = Critic::new(&[8, 8], 1.0, &mut rng);
        let v = [0.93, 1.0, 1.09];
        let u = [0.05, 0.0, -0.1];
        let g = c.dq_du(&v, &u);
        let h = 1e-6;
        for k in 0..3 {
            let (mut ua, mut ub) = (u, u);
            ua[k] += h;
            ub[k] -= h;
            let fd = (c.q(&v, &ua)[k] - c.q(&v, &ub)[k]) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_error_leaves_params_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut c = Critic::new(&[4], 1.0, &mut rng);
        let batch = [Transition { v: 1.08, u: -0.1, c: 0.0, v_next: 1.07, done: true }];
        let targets = c.q(&[1.08], &[-0.1]);
        let before = c.net.params.clone();
        let mut opt = Adam::new(c.net.n_params(), 1e-3);
        let loss = critic_update(&mut c, &mut opt, &batch, &targets).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(c.net.params, before);
    }

    #[test]
    fn myopic_critic_fits_stage_cost() {
        // gamma = 0 on a fixed buffer: Q converges to the stage cost.
        let band = BusLimits::new(0.95, 1.05);
        let batch: Vec<Transition> = (0..8)
            .map(|k| {
                let v = 0.9 + 0.025 * k as f64;
                let u = 0.05 - 0.0125 * k as f64;
                Transition { v, u, c: stage_cost(v, u, band, 100.0, 1.0), v_next: v, done: false }
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut c = Critic::new(&[64, 64], 1.0, &mut rng);
        let target = c.clone();
        let mut opt = Adam::new(c.net.n_params(), 1e-3);
        let noop = super::super::actor::FixedAction(0.0);
        // Step-size decay lets Adam settle instead of hovering at O(lr).
        for k in 0..10_000 {
            opt.lr = if k < 8000 { 1e-3 } else { 1e-4 };
            let y = td_targets(&target, &noop, &batch, 0.0);
            critic_update(&mut c, &mut opt, &batch, &y).unwrap();
        }
        let v: Vec<f64> = batch.iter().map(|t| t.v).collect();
        let u: Vec<f64> = batch.iter().map(|t| t.u).collect();
        let sup = c.q(&v, &u).iter().zip(&batch).map(|(q, t)| (q - t.c).abs()).fold(0.0, f64::max);
        assert!(sup < 1e-3, "sup error {sup}");
    }

    #[test]
    fn scaling_costs_scales_loss_quadratically() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut c = Critic::new(&[4], 1.0, &mut rng);
        c.net.params.iter_mut().for_each(|p| *p = 0.0);
        let (v, u) = ([1.1, 0.9], [0.0, 0.0]);
        let (l1, _) = c.loss_grad(&v, &u, &[0.3, 0.2]);
        let (l2, _) = c.loss_grad(&v, &u, &[0.6, 0.4]);
        assert!((l2 - 4.0 * l1).abs() < 1e-12);
    }
}
