use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{mixed_batch, sac_update, BufferRole, Deterministic, ReplayBuffer, SacAgent, SacHyper, SacLosses};
use crate::env::{
    env_step_count, evaluate_policy, BehaviorArtifacts, BehaviorPolicy, ContinuousEnv, Transition,
    TransitionDataset,
};
use crate::error::{MoanError, Result};
use crate::model::{Discriminator, DynamicsEnsemble};
use crate::nn::Activation;
use crate::penalty::{aggregate_row, discrepancy_from_probability, reshape_reward, PenaltyBreakdown, PenaltyConfig};
use crate::rng::{substream, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyTrainConfig {
    pub gamma: f64,
    pub tau: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_temperature: f64,
    pub init_log_alpha: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub batch_size: usize,
    /// Fraction of every batch drawn from the offline dataset.
    pub real_fraction: f64,
    pub rollout_horizon: usize,
    pub rollouts_per_epoch: usize,
    pub epochs: usize,
    pub updates_per_epoch: usize,
    /// Model buffer keeps the rollouts of this many most recent epochs.
    pub model_retain_epochs: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        PolicyTrainConfig {
            gamma: 0.99,
            tau: 0.005,
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            lr_temperature: 3e-4,
            init_log_alpha: 0.0,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            batch_size: 256,
            real_fraction: 0.05,
            rollout_horizon: 5,
            rollouts_per_epoch: 400,
            epochs: 40,
            updates_per_epoch: 250,
            model_retain_epochs: 5,
            eval_episodes: 10,
            seed: 0,
        }
    }
}

impl PolicyTrainConfig {
    pub fn hyper(&self) -> SacHyper {
        SacHyper {
            gamma: self.gamma,
            tau: self.tau,
            lr_actor: self.lr_actor,
            lr_critic: self.lr_critic,
            lr_temperature: self.lr_temperature,
            init_log_alpha: self.init_log_alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper().validate()?;
        let bad = |m: &str| Err(MoanError::Config(m.to_string()));
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("policy.hidden needs at least one positive width");
        }
        if !(0.0..=1.0).contains(&self.real_fraction) {
            return bad("policy.real_fraction must lie in [0, 1]");
        }
        if self.rollout_horizon == 0 {
            return bad("policy.rollout_horizon must be at least 1");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.model_retain_epochs == 0 {
            return bad("policy.batch_size, epochs and model_retain_epochs must be positive");
        }
        if self.real_fraction < 1.0 && self.rollouts_per_epoch == 0 {
            return bad("policy.rollouts_per_epoch must be positive unless real_fraction = 1");
        }
        if self.eval_episodes == 0 {
            return bad("policy.eval_episodes must be positive");
        }
        Ok(())
    }

    pub fn new_agent(&self, state_dim: usize, action_dim: usize) -> Result<SacAgent> {
        self.validate()?;
        SacAgent::new(
            state_dim,
            action_dim,
            &self.hidden,
            self.activation,
            self.hyper(),
            &mut substream(self.seed, "policy-init", 0),
        )
    }
}

/// Shaped model transitions from one round of branched rollouts.
#[derive(Debug, Clone, Default)]
pub struct RolloutOutput {
    pub transitions: Vec<Transition>,
    pub breakdowns: Vec<PenaltyBreakdown>,
    /// Branches cut short by a non-finite or out-of-box prediction.
    pub truncated: usize,
}

/// Uniform start indices into a dataset of `len` records.
pub fn draw_starts(len: usize, n: usize, rng: &mut SeededRng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..len)).collect()
}

fn widened_box(bounds: &(Vec<f64>, Vec<f64>)) -> (Vec<f64>, Vec<f64>) {
    bounds
        .0
        .iter()
        .zip(&bounds.1)
        .map(|(lo, hi)| {
            let (c, w) = (0.5 * (lo + hi), 0.5 * (hi - lo));
            (c - 2.0 * w, c + 2.0 * w)
        })
        .unzip()
}

/// Branches `n_starts` rollouts of `horizon` model steps from dataset states,
/// reshaping every reward. Rows whose prediction leaves twice the env state
/// box (or is non-finite) are dropped and their branch ends.
#[allow(clippy::too_many_arguments)]
pub fn rollout_branch(
    agent: &SacAgent,
    ensemble: &DynamicsEnsemble,
    disc: &Discriminator,
    penalty: &PenaltyConfig,
    dataset: &[Transition],
    state_box: &(Vec<f64>, Vec<f64>),
    horizon: usize,
    n_starts: usize,
    rng: &mut SeededRng,
) -> Result<RolloutOutput> {
    if dataset.is_empty() {
        return Err(MoanError::Domain("rollouts need a non-empty dataset".into()));
    }
    let (lo, hi) = widened_box(state_box);
    let d_s = ensemble.state_dim;
    let d_a = ensemble.action_dim;
    let n_members = ensemble.len();
    let out_norm = &ensemble.output_norm;
    let starts = draw_starts(dataset.len(), n_starts, rng);
    let mut states = Array2::from_shape_fn((n_starts, d_s), |(i, k)| f64::from(dataset[starts[i]].s[k]));
    let mut out = RolloutOutput::default();

    for _ in 0..horizon {
        let rows = states.nrows();
        if rows == 0 {
            break;
        }
        let noise = Array2::from_shape_simple_fn((rows, d_a), || rng.sample(StandardNormal));
        let actions = agent.policy.sample_with_noise(states.view(), noise.view())?.action;
        let x = ensemble.normalize_inputs(states.view(), actions.view());
        let heads = (0..n_members)
            .map(|k| ensemble.member_forward(k, x.view()))
            .collect::<Result<Vec<_>>>()?;
        let members: Vec<usize> = (0..rows).map(|_| rng.random_range(0..n_members)).collect();

        let draw = |rng: &mut SeededRng| -> (Array2<f64>, Array1<f64>) {
            let mut y = Array2::zeros((rows, d_s + 1));
            for i in 0..rows {
                let g = &heads[members[i]];
                for j in 0..=d_s {
                    let eps: f64 = rng.sample(StandardNormal);
                    y[[i, j]] = g.mean[[i, j]] + (0.5 * g.log_var[[i, j]]).exp() * eps;
                }
            }
            let y = out_norm.denormalize(y.view());
            let next = &states + &y.slice(ndarray::s![.., ..d_s]);
            (next, y.column(d_s).to_owned())
        };
        let (next, rewards) = draw(rng);
        let mut probs = disc.probabilities(disc.features(states.view(), actions.view(), next.view(), rewards.view()).view())?;
        for _ in 1..penalty.disc_samples {
            let (n2, r2) = draw(rng);
            probs += &disc.probabilities(disc.features(states.view(), actions.view(), n2.view(), r2.view()).view())?;
        }
        probs /= penalty.disc_samples as f64;

        let mut keep = Vec::with_capacity(rows);
        for i in 0..rows {
            let s_next = next.row(i);
            let inside = s_next
                .iter()
                .zip(lo.iter().zip(&hi))
                .all(|(v, (l, h))| v.is_finite() && v >= l && v <= h);
            if !inside || !rewards[i].is_finite() {
                out.truncated += 1;
                continue;
            }
            let norms: Vec<f64> = heads
                .iter()
                .map(|g| g.log_var.row(i).iter().map(|lv| lv.exp()).sum::<f64>().sqrt())
                .collect();
            let sigma = aggregate_row(&norms, members[i], penalty.sigma_agg);
            let u = discrepancy_from_probability(probs[i], penalty.mode);
            let b = reshape_reward(rewards[i], sigma, u, penalty.eta)?;
            out.transitions.push(Transition {
                s: states.row(i).iter().map(|&v| v as f32).collect(),
                a: actions.row(i).iter().map(|&v| v as f32).collect(),
                s_next: s_next.iter().map(|&v| v as f32).collect(),
                r: b.r_shaped as f32,
                done: false,
                terminal: false,
            });
            out.breakdowns.push(b);
            keep.push(i);
        }
        states = next.select(Axis(0), &keep);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyEpochMetrics {
    pub epoch: usize,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub critic1_loss: f64,
    pub critic2_loss: f64,
    pub actor_loss: f64,
    pub temperature_loss: f64,
    pub alpha: f64,
    pub entropy: f64,
    pub truncation_count: usize,
    pub model_buffer_len: usize,
    pub env_buffer_len: usize,
    pub penalty_mean: f64,
    pub sigma_mean: f64,
    pub u_mean: f64,
    pub shaped_reward_mean: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyTrainReport {
    pub epochs: Vec<PolicyEpochMetrics>,
    /// Environment steps spent in evaluation; training itself takes none.
    pub eval_env_steps: u64,
    pub wall_time: f64,
}

impl PolicyTrainReport {
    pub fn eval_returns(&self) -> Vec<f64> {
        self.epochs.iter().map(|m| m.eval_return_mean).collect()
    }

    pub fn final_return(&self) -> Option<f64> {
        self.epochs.last().map(|m| m.eval_return_mean)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Seed for the fixed evaluation episodes of a policy-training run.
pub fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x00E7_A15E_ED00
}

/// Offline policy optimization on the dataset plus penalized model rollouts.
/// The true environment is only touched by the per-epoch evaluation.
#[allow(clippy::too_many_arguments)]
pub fn train_policy(
    agent: &mut SacAgent,
    dataset: &TransitionDataset,
    ensemble: &DynamicsEnsemble,
    disc: &Discriminator,
    penalty: &PenaltyConfig,
    cfg: &PolicyTrainConfig,
    env: &ContinuousEnv,
    mut on_epoch: impl FnMut(&PolicyEpochMetrics) -> Result<()>,
) -> Result<PolicyTrainReport> {
    cfg.validate()?;
    penalty.validate()?;
    if dataset.is_empty() {
        return Err(MoanError::Domain("policy training needs a non-empty dataset".into()));
    }
    let started = Instant::now();
    let env_buf = ReplayBuffer::from_records(dataset.records.clone())?;
    let capacity = (cfg.rollout_horizon * cfg.rollouts_per_epoch * cfg.model_retain_epochs).max(1);
    let mut model_buf = ReplayBuffer::new(BufferRole::Model, capacity)?;
    let mut update_rng = substream(cfg.seed, "policy-update", 0);
    let state_box = env.state_box();
    let mut report = PolicyTrainReport::default();

    for epoch in 0..cfg.epochs {
        let rollout = if cfg.real_fraction < 1.0 {
            rollout_branch(
                agent,
                ensemble,
                disc,
                penalty,
                &dataset.records,
                &state_box,
                cfg.rollout_horizon,
                cfg.rollouts_per_epoch,
                &mut substream(cfg.seed, "policy-rollout", epoch as u64),
            )?
        } else {
            RolloutOutput::default()
        };
        model_buf.extend(rollout.transitions.iter().cloned());

        let mut losses = Vec::with_capacity(cfg.updates_per_epoch);
        for _ in 0..cfg.updates_per_epoch {
            let batch = mixed_batch(&env_buf, &model_buf, cfg.batch_size, cfg.real_fraction, &mut update_rng)?;
            losses.push(sac_update(agent, &batch, &mut update_rng).map_err(|e| match e {
                MoanError::Diverged { phase, detail, .. } => MoanError::Diverged {
                    phase,
                    step: epoch * cfg.updates_per_epoch + losses.len(),
                    detail,
                },
                other => other,
            })?);
        }

        let before = env_step_count();
        let stats = evaluate_policy(env, &Deterministic(&agent.policy), cfg.eval_episodes, eval_seed(cfg.seed))?;
        report.eval_env_steps += env_step_count() - before;

        let avg = |f: fn(&SacLosses) -> f64| mean(losses.iter().map(f));
        let metrics = PolicyEpochMetrics {
            epoch: epoch + 1,
            eval_return_mean: stats.mean_return,
            eval_return_std: stats.std_return,
            critic1_loss: avg(|l| l.critic1),
            critic2_loss: avg(|l| l.critic2),
            actor_loss: avg(|l| l.actor),
            temperature_loss: avg(|l| l.temperature),
            alpha: agent.alpha(),
            entropy: avg(|l| l.entropy),
            truncation_count: rollout.truncated,
            model_buffer_len: model_buf.len(),
            env_buffer_len: env_buf.len(),
            penalty_mean: mean(rollout.breakdowns.iter().map(|b| b.r_raw - b.r_shaped)),
            sigma_mean: mean(rollout.breakdowns.iter().map(|b| b.sigma_term)),
            u_mean: mean(rollout.breakdowns.iter().map(|b| b.u)),
            shaped_reward_mean: mean(rollout.breakdowns.iter().map(|b| b.r_shaped)),
        };
        on_epoch(&metrics)?;
        report.epochs.push(metrics);
    }
    report.wall_time = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Online SAC used to produce behavior policies for dataset generation, and
/// as a sanity check of the SAC implementation against the true environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineConfig {
    pub gamma: f64,
    pub tau: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_temperature: f64,
    pub init_log_alpha: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub batch_size: usize,
    pub total_steps: usize,
    /// Uniform-random steps collected before learning starts.
    pub warmup_steps: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            gamma: 0.99,
            tau: 0.005,
            lr_actor: 1e-3,
            lr_critic: 1e-3,
            lr_temperature: 1e-3,
            init_log_alpha: -1.0,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            batch_size: 128,
            total_steps: 20_000,
            warmup_steps: 1_000,
            eval_every: 250,
            eval_episodes: 5,
            seed: 0,
        }
    }
}

impl OnlineConfig {
    pub fn hyper(&self) -> SacHyper {
        SacHyper {
            gamma: self.gamma,
            tau: self.tau,
            lr_actor: self.lr_actor,
            lr_critic: self.lr_critic,
            lr_temperature: self.lr_temperature,
            init_log_alpha: self.init_log_alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper().validate()?;
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(MoanError::Config("behavior.hidden needs at least one positive width".into()));
        }
        if self.batch_size == 0 || self.total_steps == 0 || self.eval_every == 0 || self.eval_episodes == 0 {
            return Err(MoanError::Config(
                "behavior.batch_size, total_steps, eval_every and eval_episodes must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A policy snapshot taken during online training.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub eval_return: f64,
    pub replay_len: usize,
    pub agent: SacAgent,
}

#[derive(Debug, Clone)]
pub struct OnlineReport {
    pub agent: SacAgent,
    /// `(env steps, deterministic eval return)` at every evaluation.
    pub curve: Vec<(usize, f64)>,
    pub artifacts: BehaviorArtifacts,
}

/// Online SAC on the true environment. The best evaluated snapshot becomes
/// the expert; the medium policy is the earlier snapshot whose return is
/// closest to one third of the expert's, and the replay stream is cut where
/// that snapshot was taken.
pub fn train_online(env: &ContinuousEnv, cfg: &OnlineConfig) -> Result<OnlineReport> {
    cfg.validate()?;
    env.validate()?;
    let mut agent = SacAgent::new(
        env.state_dim(),
        env.action_dim(),
        &cfg.hidden,
        cfg.activation,
        cfg.hyper(),
        &mut substream(cfg.seed, "online-init", 0),
    )?;
    let mut rng = substream(cfg.seed, "online-env", 0);
    let mut update_rng = substream(cfg.seed, "online-update", 0);
    let seed_eval = eval_seed(cfg.seed);
    let random = BehaviorPolicy::UniformRandom {
        action_dim: env.action_dim(),
    };
    let random_return = evaluate_policy(env, &random, cfg.eval_episodes, seed_eval)?.mean_return;

    let mut buffer = ReplayBuffer::new(BufferRole::Env, cfg.total_steps)?;
    let empty = ReplayBuffer::new(BufferRole::Model, 1)?;
    let mut replay: Vec<Transition> = Vec::with_capacity(cfg.total_steps);
    let mut snapshots: Vec<Snapshot> = Vec::new();
    let mut curve = Vec::new();

    let mut s = env.reset(&mut rng);
    let mut t = 0usize;
    for step in 1..=cfg.total_steps {
        let a = if step <= cfg.warmup_steps {
            (0..env.action_dim()).map(|_| rng.random_range(-1.0..=1.0)).collect()
        } else {
            agent.sample_action(&s, &mut rng, false)?.0
        };
        let out = env.step(&s, &a, &mut rng)?;
        t += 1;
        let end = out.done || t == env.horizon;
        let tr = Transition {
            s: s.iter().map(|&v| v as f32).collect(),
            a: a.iter().map(|&v| v as f32).collect(),
            s_next: out.s_next.iter().map(|&v| v as f32).collect(),
            r: out.r as f32,
            done: end,
            terminal: out.done,
        };
        buffer.push(tr.clone());
        replay.push(tr);
        if end {
            s = env.reset(&mut rng);
            t = 0;
        } else {
            s = out.s_next;
        }
        if step > cfg.warmup_steps {
            let batch = mixed_batch(&buffer, &empty, cfg.batch_size, 1.0, &mut update_rng)?;
            sac_update(&mut agent, &batch, &mut update_rng)?;
        }
        if step % cfg.eval_every == 0 {
            let ret = evaluate_policy(env, &Deterministic(&agent.policy), cfg.eval_episodes, seed_eval)?.mean_return;
            curve.push((step, ret));
            snapshots.push(Snapshot {
                eval_return: ret,
                replay_len: replay.len(),
                agent: agent.clone(),
            });
        }
    }
    if snapshots.is_empty() {
        let ret = evaluate_policy(env, &Deterministic(&agent.policy), cfg.eval_episodes, seed_eval)?.mean_return;
        curve.push((cfg.total_steps, ret));
        snapshots.push(Snapshot {
            eval_return: ret,
            replay_len: replay.len(),
            agent: agent.clone(),
        });
    }

    let expert_idx = snapshots
        .iter()
        .enumerate()
        .fold(0, |best, (i, snap)| if snap.eval_return > snapshots[best].eval_return { i } else { best });
    let expert = &snapshots[expert_idx];
    let target = expert.eval_return / 3.0;
    let medium_idx = (0..=expert_idx)
        .min_by(|&i, &j| {
            let di = (snapshots[i].eval_return - target).abs();
            let dj = (snapshots[j].eval_return - target).abs();
            di.total_cmp(&dj)
        })
        .expect("at least one snapshot");
    let medium = &snapshots[medium_idx];
    replay.truncate(medium.replay_len);
    let artifacts = BehaviorArtifacts {
        env_id: env.id().to_string(),
        medium: medium.agent.policy.clone(),
        expert: expert.agent.policy.clone(),
        replay,
        medium_return: medium.eval_return,
        expert_return: expert.eval_return,
        random_return,
    };
    Ok(OnlineReport {
        agent,
        curve,
        artifacts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn start_indices_are_uniform() {
        // multinomial oracle: every cell count within 3σ of n/k
        let k = 20;
        let n = 100_000;
        let mut counts = vec![0usize; k];
        for i in draw_starts(k, n, &mut seeded(3)) {
            counts[i] += 1;
        }
        let p = 1.0 / k as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma);
        }
    }

    #[test]
    fn widened_box_doubles_about_the_center() {
        let (lo, hi) = widened_box(&(vec![-1.0, 0.0], vec![1.0, 4.0]));
        assert_eq!(lo, vec![-2.0, -2.0]);
        assert_eq!(hi, vec![2.0, 6.0]);
    }
}
