//! Decentralized DDPG: one actor, critic, target pair and replay buffer per
//! controlled channel, trained on shared closed-loop episodes.
//!
//! Each step every channel observes its own voltage, acts, and stores its
//! local transition. Once a buffer holds more than one batch, each channel
//! takes one actor step then one critic step, followed by soft target
//! updates. Monotone actors are projected after every step, so every
//! intermediate policy lies in the certified class.

pub mod actor;
pub mod buffer;
pub mod critic;
pub mod mlp;

use std::io::{Read, Write};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{stage_cost, EnvMode, VoltageEnv};
use crate::grid::{GridMatrices, RadialNetwork};
use crate::lyapunov::slope_ceiling;
use crate::policy::{stability_gain_bound, Controller, MonotonePolicy, PolicyError, PolicyInit, SLOPE_FLOOR};
use crate::scenario::{generate, mix_seed, ScenarioConfig, ScenarioError, ScenarioKind};

pub use actor::{actor_update, Actor, MlpActor, MonotoneActor};
pub use buffer::{ReplayBuffer, Transition};
pub use critic::{critic_update, td_targets, ActionValue, Critic};
pub use mlp::{Adam, Mlp};

const SCENARIO_TAG: u64 = 0x7261_696e;
const CRITIC_TAG: u64 = 0x6372_6974;
const ACTOR_TAG: u64 = 0x6163_746f;
const BUFFER_TAG: u64 = 0x6275_6666;
const NOISE_TAG: u64 = 0x6e6f_6973;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training fault: {0}")]
    NonFinite(String),
    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub batch: usize,
    pub capacity: usize,
    pub episodes: usize,
    pub steps: usize,
    pub dt: f64,
    pub tau: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub seed: u64,
    pub env: EnvMode,
    /// Band tolerance that ends an episode early (squared per-unit).
    pub recovery_tol: f64,
    pub scenario_kind: ScenarioKind,
    pub deviation_range: (f64, f64),
    pub critic_hidden: Vec<usize>,
    /// Hidden sizes of the unconstrained ablation actor.
    pub actor_hidden: Vec<usize>,
    pub units: usize,
    /// Initial slope outside the band; `None` starts at the linear droop
    /// stability bound.
    pub init_slope: Option<f64>,
    pub knot_spacing: f64,
    /// Slope ceiling as a fraction of `2 / (dt lambda_max(X))`.
    pub kappa: f64,
    pub eps_w: f64,
    pub eps_b: f64,
    pub checkpoint_every: usize,
    /// Gaussian action-noise std. Nonzero noise voids the during-training
    /// certificate because executed actions leave the monotone class.
    pub action_noise: f64,
    pub curve_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            lr_actor: 1e-4,
            lr_critic: 1e-3,
            batch: 64,
            capacity: 50_000,
            episodes: 500,
            steps: 100,
            dt: 1.0,
            tau: 0.005,
            eta1: 100.0,
            eta2: 1.0,
            seed: 0,
            env: EnvMode::Linear,
            recovery_tol: 1e-3,
            scenario_kind: ScenarioKind::Mixed,
            deviation_range: (0.05, 0.15),
            critic_hidden: vec![64, 64],
            actor_hidden: vec![32, 32],
            units: 8,
            init_slope: None,
            knot_spacing: 0.02,
            kappa: 0.95,
            eps_w: SLOPE_FLOOR,
            eps_b: 0.0,
            checkpoint_every: 50,
            action_noise: 0.0,
            curve_window: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::Config(m.into()));
        let pos = [
            ("lr_actor", self.lr_actor),
            ("lr_critic", self.lr_critic),
            ("dt", self.dt),
            ("tau", self.tau),
            ("eta1", self.eta1),
            ("knot_spacing", self.knot_spacing),
            ("kappa", self.kappa),
            ("eps_w", self.eps_w),
        ];
        for (name, x) in pos {
            if !(x > 0.0 && x.is_finite()) {
                return Err(RlError::Config(format!("{name} must be positive (got {x})")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if self.tau > 1.0 {
            return bad("tau must be at most 1");
        }
        if !(self.kappa < 1.0) {
            return bad("kappa must be below 1 for the slope ceiling to certify");
        }
        if !(self.eta2 >= 0.0) || !(self.eps_b >= 0.0) || !(self.action_noise >= 0.0) || !(self.recovery_tol >= 0.0) {
            return bad("eta2, eps_b, action_noise and recovery_tol must be nonnegative");
        }
        if self.batch == 0 || self.steps == 0 || self.capacity < self.batch {
            return bad("batch and steps must be positive and capacity at least one batch");
        }
        if self.units < 2 {
            return bad("units must be at least 2");
        }
        if self.critic_hidden.is_empty() || self.critic_hidden.contains(&0) || self.actor_hidden.contains(&0) {
            return bad("hidden layer sizes must be positive");
        }
        if self.curve_window == 0 || self.checkpoint_every == 0 {
            return bad("curve_window and checkpoint_every must be positive");
        }
        if matches!(self.init_slope, Some(s) if !(s >= self.eps_w)) {
            return bad("init_slope must be at least eps_w");
        }
        ScenarioConfig {
            deviation_range: self.deviation_range,
            ..ScenarioConfig::new(self.scenario_kind, 1, 0)
        }
        .validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: usize,
    /// Negated total stage cost over the episode.
    #[serde(rename = "return")]
    pub ret: f64,
    /// Mean steps-to-band over the trailing `curve_window` episodes.
    pub mean_recovery_steps: f64,
}

pub const CURVE_COLUMNS: [&str; 3] = ["episode", "return", "mean_recovery_steps"];

pub fn write_curve_csv(curve: &[CurvePoint], out: impl Write) -> Result<(), RlError> {
    let mut w = csv::Writer::from_writer(out);
    if curve.is_empty() {
        w.write_record(CURVE_COLUMNS)?;
    }
    for p in curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve_csv(input: impl Read) -> Result<Vec<CurvePoint>, RlError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CURVE_COLUMNS {
        return Err(RlError::Config(format!("curve header {header:?} is not {CURVE_COLUMNS:?}")));
    }
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbortedEpisode {
    pub episode: usize,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<P> {
    pub policy: P,
    pub curve: Vec<CurvePoint>,
    pub aborted: Vec<AbortedEpisode>,
    /// Steps taken by every episode; `steps` when the band was not reached.
    pub episode_steps: Vec<usize>,
}

/// Unconstrained per-channel MLP policy (no stability certificate).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpPolicy {
    pub actors: Vec<MlpActor>,
}

impl Controller for MlpPolicy {
    fn n_channels(&self) -> usize {
        self.actors.len()
    }

    fn act(&self, k: usize, v: f64) -> f64 {
        self.actors[k].action(v)
    }

    fn slope_bounds(&self) -> Option<Vec<(f64, f64)>> {
        None
    }

    fn label(&self) -> String {
        "ddpg".into()
    }
}

struct Agent<A> {
    actor: A,
    actor_t: A,
    critic: Critic,
    critic_t: Critic,
    opt_a: Adam,
    opt_c: Adam,
    buffer: ReplayBuffer,
}

impl<A: Actor> Agent<A> {
    fn update(&mut self, cfg: &TrainConfig) -> Result<(), RlError> {
        let batch = self.buffer.sample(cfg.batch);
        actor_update(&mut self.actor, &mut self.opt_a, &self.critic, &batch)?;
        let y = td_targets(&self.critic_t, &self.actor_t, &batch, cfg.gamma);
        critic_update(&mut self.critic, &mut self.opt_c, &batch, &y)?;
        self.actor_t.soft_update(&self.actor, cfg.tau);
        self.critic_t.net.soft_update(&self.critic.net, cfg.tau);
        Ok(())
    }
}

fn rng_for(seed: u64, tag: u64, k: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(mix_seed(seed, tag));
    r.set_stream(k as u64 + 1);
    r
}

/// Runs the training loop over arbitrary per-channel actors. `checkpoint`
/// sees the actors before the first episode, every `checkpoint_every`
/// episodes and after the last one.
pub fn train_actors<A: Actor>(
    net: &RadialNetwork,
    gm: &GridMatrices,
    cfg: &TrainConfig,
    actors: Vec<A>,
    mut checkpoint: impl FnMut(usize, &[A]) -> Result<(), RlError>,
) -> Result<TrainOutcome<Vec<A>>, RlError> {
    cfg.validate()?;
    let idx = net.controlled_indices();
    if actors.len() != idx.len() {
        return Err(RlError::Config(format!(
            "{} actors for {} controlled channels",
            actors.len(),
            idx.len()
        )));
    }
    let limits = net.state_limits();
    let mut agents: Vec<Agent<A>> = actors
        .into_iter()
        .enumerate()
        .map(|(k, actor)| {
            let v_ref = limits[idx[k]].midpoint();
            let critic = Critic::new(&cfg.critic_hidden, v_ref, &mut rng_for(cfg.seed, CRITIC_TAG, k));
            Agent {
                actor_t: actor.clone(),
                opt_a: Adam::new(actor.params().len(), cfg.lr_actor),
                opt_c: Adam::new(critic.net.n_params(), cfg.lr_critic),
                critic_t: critic.clone(),
                critic,
                actor,
                buffer: ReplayBuffer::new(cfg.capacity, rng_for(cfg.seed, BUFFER_TAG, k)),
            }
        })
        .collect();
    let mut noise: Vec<ChaCha8Rng> = (0..idx.len()).map(|k| rng_for(cfg.seed, NOISE_TAG, k)).collect();
    let normal = Normal::new(0.0, cfg.action_noise).map_err(|e| RlError::Config(e.to_string()))?;

    let snapshot = |agents: &[Agent<A>]| agents.iter().map(|a| a.actor.clone()).collect::<Vec<_>>();
    checkpoint(0, &snapshot(&agents))?;

    let scenarios = if cfg.episodes == 0 {
        Vec::new()
    } else {
        generate(
            net,
            gm,
            &ScenarioConfig {
                deviation_range: cfg.deviation_range,
                ..ScenarioConfig::new(cfg.scenario_kind, cfg.episodes, mix_seed(cfg.seed, SCENARIO_TAG))
            },
        )?
    };

    let mut env = VoltageEnv::new(net, gm, cfg.env, cfg.dt);
    let ctl_limits = env.controlled_limits();
    let mut curve = Vec::with_capacity(cfg.episodes);
    let mut aborted = Vec::new();
    let mut episode_steps = Vec::with_capacity(cfg.episodes);
    let mut last_checkpoint = 0;
    for (e, sc) in scenarios.iter().enumerate() {
        let mut cost = 0.0;
        let mut steps = cfg.steps;
        let mut v = match env.reset(&sc.p_vec(), &sc.q0_vec()) {
            Ok(s) => s.v.clone(),
            Err(err) => {
                aborted.push(AbortedEpisode { episode: e + 1, reason: err.to_string() });
                DVector::zeros(0)
            }
        };
        if !v.is_empty() {
            for t in 0..cfg.steps {
                let mut u = DVector::zeros(v.len());
                for (k, &i) in idx.iter().enumerate() {
                    u[i] = agents[k].actor.action(v[i]);
                    if cfg.action_noise > 0.0 {
                        u[i] += normal.sample(&mut noise[k]);
                    }
                }
                let next = match env.step(&u) {
                    Ok(s) => s.v.clone(),
                    Err(err) => {
                        aborted.push(AbortedEpisode {
                            episode: e + 1,
                            reason: format!("step {}: {err}", t + 1),
                        });
                        break;
                    }
                };
                let done = idx
                    .iter()
                    .zip(&ctl_limits)
                    .all(|(&i, b)| b.violation(next[i]).abs() <= cfg.recovery_tol);
                for (k, &i) in idx.iter().enumerate() {
                    let c = stage_cost(v[i], u[i], ctl_limits[k], cfg.eta1, cfg.eta2);
                    cost += c;
                    let tr = Transition { v: v[i], u: u[i], c, v_next: next[i], done };
                    if !tr.is_finite() {
                        return Err(RlError::NonFinite(format!("episode {} channel {k}: {tr:?}", e + 1)));
                    }
                    agents[k].buffer.push(tr);
                }
                if agents.iter().all(|a| a.buffer.len() > cfg.batch) {
                    agents.par_iter_mut().map(|a| a.update(cfg)).collect::<Result<(), _>>()?;
                }
                v = next;
                if done {
                    steps = t + 1;
                    break;
                }
            }
        }
        episode_steps.push(steps);
        let window = &episode_steps[episode_steps.len().saturating_sub(cfg.curve_window)..];
        curve.push(CurvePoint {
            episode: e + 1,
            ret: -cost,
            mean_recovery_steps: window.iter().sum::<usize>() as f64 / window.len() as f64,
        });
        if (e + 1) % cfg.checkpoint_every == 0 {
            checkpoint(e + 1, &snapshot(&agents))?;
            last_checkpoint = e + 1;
        }
    }
    if last_checkpoint != scenarios.len() {
        checkpoint(scenarios.len(), &snapshot(&agents))?;
    }
    Ok(TrainOutcome {
        policy: agents.into_iter().map(|a| a.actor).collect(),
        curve,
        aborted,
        episode_steps,
    })
}

/// Starting slope and per-channel ceiling for monotone training.
pub fn monotone_bounds(net: &RadialNetwork, gm: &GridMatrices, cfg: &TrainConfig) -> Result<(f64, f64), RlError> {
    let ceiling = slope_ceiling(gm, net, cfg.dt, cfg.kappa);
    let start = match cfg.init_slope {
        Some(s) => s,
        None => stability_gain_bound(&gm.x_sub(&net.controlled_indices()))?,
    };
    Ok((start.clamp(cfg.eps_w, ceiling.max(cfg.eps_w)), ceiling))
}

pub fn initial_policy(net: &RadialNetwork, gm: &GridMatrices, cfg: &TrainConfig) -> Result<MonotonePolicy, RlError> {
    let (slope, ceiling) = monotone_bounds(net, gm, cfg)?;
    let mut policy = MonotonePolicy::init(
        net,
        &PolicyInit {
            d: cfg.units,
            slope,
            knot_spacing: cfg.knot_spacing,
        },
    )?;
    policy.project(cfg.eps_w, cfg.eps_b, Some(&vec![ceiling; policy.channels.len()]));
    Ok(policy)
}

fn assemble(template: &MonotonePolicy, actors: &[MonotoneActor]) -> MonotonePolicy {
    MonotonePolicy {
        version: template.version,
        channels: actors.iter().map(|a| a.channel.clone()).collect(),
    }
}

/// Trains a monotone policy. `checkpoint` receives every intermediate policy
/// (see [`train_actors`]) and may reject it.
pub fn train(
    net: &RadialNetwork,
    gm: &GridMatrices,
    cfg: &TrainConfig,
    mut checkpoint: impl FnMut(usize, &MonotonePolicy) -> Result<(), RlError>,
) -> Result<TrainOutcome<MonotonePolicy>, RlError> {
    cfg.validate()?;
    let init = initial_policy(net, gm, cfg)?;
    let (_, ceiling) = monotone_bounds(net, gm, cfg)?;
    let actors = init
        .channels
        .iter()
        .map(|ch| MonotoneActor::new(ch.clone(), cfg.eps_w, cfg.eps_b, Some(ceiling)))
        .collect();
    let out = train_actors(net, gm, cfg, actors, |e, a| checkpoint(e, &assemble(&init, a)))?;
    Ok(TrainOutcome {
        policy: assemble(&init, &out.policy),
        curve: out.curve,
        aborted: out.aborted,
        episode_steps: out.episode_steps,
    })
}

/// Ablation: the same loop with unconstrained MLP actors.
pub fn train_unconstrained(net: &RadialNetwork, gm: &GridMatrices, cfg: &TrainConfig) -> Result<TrainOutcome<MlpPolicy>, RlError> {
    cfg.validate()?;
    let limits = net.state_limits();
    let actors = net
        .controlled_indices()
        .iter()
        .enumerate()
        .map(|(k, &i)| MlpActor::new(&cfg.actor_hidden, limits[i].midpoint(), &mut rng_for(cfg.seed, ACTOR_TAG, k)))
        .collect();
    let out = train_actors(net, gm, cfg, actors, |_, _| Ok(()))?;
    Ok(TrainOutcome {
        policy: MlpPolicy { actors: out.policy },
        curve: out.curve,
        aborted: out.aborted,
        episode_steps: out.episode_steps,
    })
}
