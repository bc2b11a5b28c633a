//! Soft actor-critic with twin critics, target networks and a learned
//! temperature, plus the model-based training loop built on top of it.

mod buffer;
mod policy;
mod train;

use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{MoanError, Result};
use crate::nn::{Activation, AdamConfig, AdamState, NetSpec, Network, OutputHead};
use crate::rng::SeededRng;

pub use buffer::{mixed_batch, BufferRole, ReplayBuffer};
pub use policy::{Deterministic, PolicySample, SquashedGaussianPolicy, Stochastic};
pub use train::{
    rollout_branch, train_online, train_policy, OnlineConfig, OnlineReport, PolicyEpochMetrics,
    PolicyTrainConfig, PolicyTrainReport, RolloutOutput,
};

/// Column-major view of a set of transitions used for one update.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    /// 1.0 where bootstrapping stops.
    pub dones: Array1<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacHyper {
    pub gamma: f64,
    pub tau: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_temperature: f64,
    pub init_log_alpha: f64,
}

impl Default for SacHyper {
    fn default() -> Self {
        SacHyper {
            gamma: 0.99,
            tau: 0.005,
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            lr_temperature: 3e-4,
            init_log_alpha: 0.0,
        }
    }
}

impl SacHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(MoanError::Config("policy.gamma must lie in (0, 1)".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(MoanError::Config("policy.tau must lie in (0, 1]".into()));
        }
        if !(self.lr_actor > 0.0 && self.lr_critic > 0.0 && self.lr_temperature > 0.0) {
            return Err(MoanError::Config("policy learning rates must be positive".into()));
        }
        if !self.init_log_alpha.is_finite() {
            return Err(MoanError::Config("policy.init_log_alpha must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SacAgent {
    pub policy: SquashedGaussianPolicy,
    pub q1: Network,
    pub q2: Network,
    pub q1_target: Network,
    pub q2_target: Network,
    pub log_alpha: f64,
    pub target_entropy: f64,
    pub hyper: SacHyper,
    policy_opt: AdamState,
    q1_opt: AdamState,
    q2_opt: AdamState,
    alpha_opt: AdamState,
}

/// Losses of one `sac_update`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SacLosses {
    pub critic1: f64,
    pub critic2: f64,
    pub actor: f64,
    pub temperature: f64,
    pub alpha: f64,
    pub entropy: f64,
}

fn critic_spec(d_s: usize, d_a: usize, hidden: &[usize], act: Activation) -> NetSpec {
    NetSpec::mlp(d_s + d_a, hidden, 1, act, OutputHead::Linear)
}

impl SacAgent {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        activation: Activation,
        hyper: SacHyper,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        hyper.validate()?;
        let policy = SquashedGaussianPolicy::new(state_dim, action_dim, hidden, activation, rng)?;
        let q1 = Network::init(critic_spec(state_dim, action_dim, hidden, activation), rng)?;
        let q2 = Network::init(critic_spec(state_dim, action_dim, hidden, activation), rng)?;
        Ok(Self::from_parts(policy, q1, q2, hyper))
    }

    /// Assembles an agent with fresh optimizer state and targets equal to the critics.
    pub fn from_parts(policy: SquashedGaussianPolicy, q1: Network, q2: Network, hyper: SacHyper) -> Self {
        let action_dim = policy.action_dim();
        SacAgent {
            policy_opt: AdamState::new(policy.net.params().len(), AdamConfig::with_lr(hyper.lr_actor)),
            q1_opt: AdamState::new(q1.params().len(), AdamConfig::with_lr(hyper.lr_critic)),
            q2_opt: AdamState::new(q2.params().len(), AdamConfig::with_lr(hyper.lr_critic)),
            alpha_opt: AdamState::new(1, AdamConfig::with_lr(hyper.lr_temperature)),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            policy,
            q1,
            q2,
            log_alpha: hyper.init_log_alpha,
            target_entropy: -(action_dim as f64),
            hyper,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn state_dim(&self) -> usize {
        self.policy.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.policy.action_dim()
    }

    pub fn sample_action(&self, s: &[f64], rng: &mut SeededRng, deterministic: bool) -> Result<(Vec<f64>, f64)> {
        if s.iter().any(|v| !v.is_finite()) {
            return Err(MoanError::NonFinite("policy state".into()));
        }
        self.policy.sample_action(s, rng, deterministic)
    }
}

fn q_values(q: &Network, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array1<f64>> {
    let x = concatenate![Axis(1), states, actions];
    Ok(q.forward(x.view())?.column(0).to_owned())
}

/// Soft Bellman targets `r + γ (1 − done) (min Q̄(s', a') − α log π(a'|s'))`
/// with `a' = tanh(μ + σ ε)` for the supplied noise.
pub fn critic_targets(agent: &SacAgent, batch: &Batch, next_noise: ArrayView2<f64>) -> Result<Array1<f64>> {
    let next = agent.policy.sample_with_noise(batch.next_states.view(), next_noise)?;
    let t1 = q_values(&agent.q1_target, batch.next_states.view(), next.action.view())?;
    let t2 = q_values(&agent.q2_target, batch.next_states.view(), next.action.view())?;
    let alpha = agent.alpha();
    let mut y = Array1::zeros(batch.len());
    for i in 0..batch.len() {
        let soft = t1[i].min(t2[i]) - alpha * next.log_prob[i];
        y[i] = batch.rewards[i] + agent.hyper.gamma * (1.0 - batch.dones[i]) * soft;
    }
    Ok(y)
}

/// `mean ½ (Q(s, a) − y)²` and its parameter gradient.
pub fn critic_loss(
    q: &Network,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    targets: ArrayView1<f64>,
) -> Result<(f64, Vec<f64>)> {
    let x = concatenate![Axis(1), states, actions];
    let (out, cache) = q.forward_cached(x.view())?;
    let n = targets.len() as f64;
    let err = &out.column(0) - &targets;
    let loss = 0.5 * err.mapv(|e| e * e).sum() / n;
    let d_out = (err / n).insert_axis(Axis(1));
    let (grad, _) = q.backward(&cache, d_out.view())?;
    Ok((loss, grad))
}

/// Actor objective `mean(α log π(ã|s) − min(Q1, Q2)(s, ã))` for fixed noise,
/// with its gradient in the policy parameters and the sampled log-probs.
pub fn actor_loss(
    policy: &SquashedGaussianPolicy,
    q1: &Network,
    q2: &Network,
    alpha: f64,
    states: ArrayView2<f64>,
    noise: ArrayView2<f64>,
) -> Result<(f64, Vec<f64>, Array1<f64>)> {
    let sample = policy.sample_with_noise(states, noise)?;
    let x = concatenate![Axis(1), states, sample.action];
    let (o1, c1) = q1.forward_cached(x.view())?;
    let (o2, c2) = q2.forward_cached(x.view())?;
    let n = states.nrows();
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut d1 = Array2::zeros((n, 1));
    let mut d2 = Array2::zeros((n, 1));
    for i in 0..n {
        let (a, b) = (o1[[i, 0]], o2[[i, 0]]);
        loss += alpha * sample.log_prob[i] - a.min(b);
        if a <= b {
            d1[[i, 0]] = -inv;
        } else {
            d2[[i, 0]] = -inv;
        }
    }
    let (_, dx1) = q1.backward(&c1, d1.view())?;
    let (_, dx2) = q2.backward(&c2, d2.view())?;
    let d_s = states.ncols();
    let d_action = (&dx1 + &dx2).slice_move(ndarray::s![.., d_s..]);
    let d_log_prob = Array1::from_elem(n, alpha * inv);
    let grad = policy.backward(&sample, d_action.view(), d_log_prob.view())?;
    Ok((loss * inv, grad, sample.log_prob))
}

/// `−log α · mean(log π + H̄)` and its derivative in `log α`.
pub fn temperature_loss(log_alpha: f64, log_probs: ArrayView1<f64>, target_entropy: f64) -> (f64, f64) {
    let m = log_probs.iter().map(|lp| lp + target_entropy).sum::<f64>() / log_probs.len() as f64;
    (-log_alpha * m, -m)
}

fn finite(value: f64, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(MoanError::Diverged {
            phase: "sac".into(),
            step: 0,
            detail: format!("{what} loss became {value}"),
        })
    }
}

fn noise(rows: usize, cols: usize, rng: &mut SeededRng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// One gradient step on both critics, the actor and the temperature,
/// followed by Polyak averaging of the target critics.
pub fn sac_update(agent: &mut SacAgent, batch: &Batch, rng: &mut SeededRng) -> Result<SacLosses> {
    if batch.is_empty() {
        return Err(MoanError::Domain("sac_update needs a non-empty batch".into()));
    }
    let n = batch.len();
    let d_a = agent.action_dim();
    let next_noise = noise(n, d_a, rng);
    let y = critic_targets(agent, batch, next_noise.view())?;

    let (c1, g1) = critic_loss(&agent.q1, batch.states.view(), batch.actions.view(), y.view())?;
    let (c2, g2) = critic_loss(&agent.q2, batch.states.view(), batch.actions.view(), y.view())?;
    finite(c1, "critic1")?;
    finite(c2, "critic2")?;
    agent.q1_opt.step(agent.q1.params_mut(), &g1)?;
    agent.q2_opt.step(agent.q2.params_mut(), &g2)?;

    let pi_noise = noise(n, d_a, rng);
    let alpha = agent.alpha();
    let (actor, g_pi, log_probs) = actor_loss(
        &agent.policy,
        &agent.q1,
        &agent.q2,
        alpha,
        batch.states.view(),
        pi_noise.view(),
    )?;
    finite(actor, "actor")?;
    agent.policy_opt.step(agent.policy.net.params_mut(), &g_pi)?;

    let (temperature, g_alpha) = temperature_loss(agent.log_alpha, log_probs.view(), agent.target_entropy);
    finite(temperature, "temperature")?;
    let mut la = [agent.log_alpha];
    agent.alpha_opt.step(&mut la, &[g_alpha])?;
    agent.log_alpha = la[0];

    let tau = agent.hyper.tau;
    agent.q1_target.soft_update_from(&agent.q1, tau);
    agent.q2_target.soft_update_from(&agent.q2, tau);
    Ok(SacLosses {
        critic1: c1,
        critic2: c2,
        actor,
        temperature,
        alpha,
        entropy: -log_probs.mean().unwrap_or(0.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use crate::rng::seeded;

    fn agent(seed: u64) -> SacAgent {
        SacAgent::new(3, 2, &[6], Activation::Tanh, SacHyper::default(), &mut seeded(seed)).unwrap()
    }

    fn batch(n: usize, seed: u64, done: f64) -> Batch {
        let mut rng = seeded(seed);
        let mut u = |r: usize, c: usize| Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0));
        Batch {
            states: u(n, 3),
            actions: u(n, 2),
            next_states: u(n, 3),
            rewards: u(n, 1).column(0).to_owned(),
            dones: Array1::from_elem(n, done),
        }
    }

    #[test]
    fn terminal_targets_equal_rewards() {
        let a = agent(0);
        let b = batch(8, 1, 1.0);
        let y = critic_targets(&a, &b, noise(8, 2, &mut seeded(2)).view()).unwrap();
        assert_eq!(y, b.rewards);
    }

    #[test]
    fn targets_use_the_smaller_target_critic() {
        let mut a = agent(3);
        // constant critics: zero weights, bias set by hand
        for (q, c) in [(&mut a.q1_target, 2.0), (&mut a.q2_target, -1.5)] {
            q.params_mut().iter_mut().for_each(|p| *p = 0.0);
            let last = q.params().len() - 1;
            q.params_mut()[last] = c;
        }
        a.log_alpha = f64::NEG_INFINITY; // α = 0 removes the entropy term
        let b = batch(5, 4, 0.0);
        let y = critic_targets(&a, &b, noise(5, 2, &mut seeded(5)).view()).unwrap();
        for i in 0..5 {
            assert!((y[i] - (b.rewards[i] + 0.99 * -1.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn tau_one_copies_online_critics() {
        let hyper = SacHyper {
            tau: 1.0,
            ..SacHyper::default()
        };
        let mut a = SacAgent::new(3, 2, &[6], Activation::Relu, hyper, &mut seeded(6)).unwrap();
        sac_update(&mut a, &batch(16, 7, 0.0), &mut seeded(8)).unwrap();
        assert_eq!(a.q1_target.params(), a.q1.params());
        assert_eq!(a.q2_target.params(), a.q2.params());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let a = agent(10);
        let b = batch(6, 11, 0.0);
        let y = critic_targets(&a, &b, noise(6, 2, &mut seeded(12)).view()).unwrap();
        let (_, g) = critic_loss(&a.q1, b.states.view(), b.actions.view(), y.view()).unwrap();
        let spec = a.q1.spec().clone();
        let rep = grad_check(a.q1.params(), &g, 1e-5, |p| {
            let q = Network::from_params(spec.clone(), p.to_vec()).unwrap();
            critic_loss(&q, b.states.view(), b.actions.view(), y.view()).unwrap().0
        });
        assert!(rep.max_relative_error < 1e-4, "{rep:?}");

        let eps = noise(6, 2, &mut seeded(13));
        let (_, g, _) = actor_loss(&a.policy, &a.q1, &a.q2, 0.3, b.states.view(), eps.view()).unwrap();
        let pspec = a.policy.net.spec().clone();
        let rep = grad_check(a.policy.net.params(), &g, 1e-5, |p| {
            let pi = SquashedGaussianPolicy {
                net: Network::from_params(pspec.clone(), p.to_vec()).unwrap(),
            };
            actor_loss(&pi, &a.q1, &a.q2, 0.3, b.states.view(), eps.view()).unwrap().0
        });
        assert!(rep.max_relative_error < 1e-4, "{rep:?}");

        let lp = Array1::from(vec![-0.5, 1.2, 0.3]);
        let (_, g) = temperature_loss(0.2, lp.view(), -2.0);
        let rep = grad_check(&[0.2], &[g], 1e-5, |p| temperature_loss(p[0], lp.view(), -2.0).0);
        assert!(rep.max_relative_error < 1e-8, "{rep:?}");
    }

    #[test]
    fn update_is_seed_deterministic() {
        let b = batch(32, 20, 0.0);
        let run = || {
            let mut a = agent(21);
            let mut rng = seeded(22);
            for _ in 0..5 {
                sac_update(&mut a, &b, &mut rng).unwrap();
            }
            a
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn temperature_rises_when_entropy_is_below_target() {
        // log-probs far above −H̄ mean entropy too low: α must grow
        let (_, g) = temperature_loss(0.0, Array1::from(vec![5.0, 6.0]).view(), -2.0);
        assert!(g < 0.0);
    }
}
