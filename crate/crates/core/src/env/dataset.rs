//! Offline transition datasets and the four behavior regimes used to build them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{run_episode, Actor, ContinuousEnv, EpisodeStep};
use crate::error::{MoanError, Result};
use crate::rng::{substream, SeededRng};
use crate::sac::{SquashedGaussianPolicy, Stochastic};

/// Lower bound applied to every normalization standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f32>,
    pub a: Vec<f32>,
    pub s_next: Vec<f32>,
    pub r: f32,
    /// Last record of an episode (terminal state or time limit).
    pub done: bool,
    /// Terminal state: value bootstrapping stops here. A time-limit end is
    /// `done` but not `terminal`.
    pub terminal: bool,
}

impl Transition {
    pub fn from_step(step: &EpisodeStep) -> Self {
        Transition {
            s: step.s.iter().map(|&v| v as f32).collect(),
            a: step.a.iter().map(|&v| v as f32).collect(),
            s_next: step.s_next.iter().map(|&v| v as f32).collect(),
            r: step.r as f32,
            done: step.done,
            terminal: step.terminal,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.s
            .iter()
            .chain(&self.a)
            .chain(&self.s_next)
            .all(|v| v.is_finite())
            && self.r.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BehaviorTag {
    Random,
    Medium,
    MediumReplay,
    MediumExpert,
}

impl BehaviorTag {
    pub fn as_str(self) -> &'static str {
        match self {
            BehaviorTag::Random => "random",
            BehaviorTag::Medium => "medium",
            BehaviorTag::MediumReplay => "medium-replay",
            BehaviorTag::MediumExpert => "medium-expert",
        }
    }

    pub fn needs_behavior_checkpoint(self) -> bool {
        !matches!(self, BehaviorTag::Random)
    }
}

impl std::str::FromStr for BehaviorTag {
    type Err = MoanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(BehaviorTag::Random),
            "medium" => Ok(BehaviorTag::Medium),
            "medium-replay" => Ok(BehaviorTag::MediumReplay),
            "medium-expert" => Ok(BehaviorTag::MediumExpert),
            other => Err(MoanError::Config(format!("unknown behavior tag `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub env_id: String,
    pub d_s: usize,
    pub d_a: usize,
    pub count: usize,
    pub behavior_tag: BehaviorTag,
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub seed: u64,
    /// Reference return of the best online policy, when one was involved.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_return: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub medium_return: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    pub header: DatasetHeader,
    pub records: Vec<Transition>,
}

fn mean_std<'a>(rows: impl Iterator<Item = &'a [f32]> + Clone, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; dim];
    let mut n = 0usize;
    for row in rows.clone() {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += f64::from(v);
        }
        n += 1;
    }
    let n = n.max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for row in rows {
        for ((acc, &v), m) in var.iter_mut().zip(row).zip(&mean) {
            *acc += (f64::from(v) - m).powi(2);
        }
    }
    let std = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
    (mean, std)
}

impl TransitionDataset {
    /// Builds a dataset and its normalization statistics from raw records.
    pub fn from_records(
        env_id: &str,
        d_s: usize,
        d_a: usize,
        behavior_tag: BehaviorTag,
        seed: u64,
        records: Vec<Transition>,
    ) -> Result<Self> {
        for (i, t) in records.iter().enumerate() {
            if t.s.len() != d_s || t.s_next.len() != d_s {
                return Err(MoanError::dim(format!("record {i} state"), d_s, t.s.len()));
            }
            if t.a.len() != d_a {
                return Err(MoanError::dim(format!("record {i} action"), d_a, t.a.len()));
            }
            if !t.is_finite() {
                return Err(MoanError::NonFinite(format!("record {i}")));
            }
        }
        let (state_mean, state_std) = mean_std(records.iter().map(|t| t.s.as_slice()), d_s);
        let (action_mean, action_std) = mean_std(records.iter().map(|t| t.a.as_slice()), d_a);
        let rewards: Vec<[f32; 1]> = records.iter().map(|t| [t.r]).collect();
        let (rm, rs) = mean_std(rewards.iter().map(|r| r.as_slice()), 1);
        Ok(TransitionDataset {
            header: DatasetHeader {
                env_id: env_id.to_string(),
                d_s,
                d_a,
                count: records.len(),
                behavior_tag,
                state_mean,
                state_std,
                action_mean,
                action_std,
                reward_mean: rm[0],
                reward_std: rs[0],
                seed,
                expert_return: None,
                medium_return: None,
            },
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Mean undiscounted return of the complete episodes in the records.
    /// Episodes are delimited by `done`; a trailing partial episode is ignored.
    pub fn mean_episode_return(&self) -> Option<f64> {
        let mut returns = Vec::new();
        let mut acc = 0.0;
        for t in &self.records {
            acc += f64::from(t.r);
            if t.done {
                returns.push(acc);
                acc = 0.0;
            }
        }
        if returns.is_empty() {
            None
        } else {
            Some(returns.iter().sum::<f64>() / returns.len() as f64)
        }
    }
}

/// Policy used to collect offline data.
#[derive(Debug, Clone)]
pub enum BehaviorPolicy {
    UniformRandom { action_dim: usize },
    Checkpoint(SquashedGaussianPolicy),
    Mixture {
        components: Vec<BehaviorPolicy>,
        weights: Vec<f64>,
    },
}

impl BehaviorPolicy {
    pub fn mixture(components: Vec<BehaviorPolicy>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() || components.len() != weights.len() {
            return Err(MoanError::Config(
                "mixture needs one weight per component".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 || weights.iter().any(|w| *w < 0.0) {
            return Err(MoanError::Config(format!(
                "mixture weights must be non-negative and sum to 1, got {total}"
            )));
        }
        Ok(BehaviorPolicy::Mixture {
            components,
            weights,
        })
    }
}

impl Actor for BehaviorPolicy {
    fn act(&self, s: &[f64], rng: &mut SeededRng) -> Vec<f64> {
        match self {
            BehaviorPolicy::UniformRandom { action_dim } => {
                (0..*action_dim).map(|_| rng.random_range(-1.0..=1.0)).collect()
            }
            BehaviorPolicy::Checkpoint(policy) => Stochastic(policy).act(s, rng),
            BehaviorPolicy::Mixture {
                components,
                weights,
            } => {
                let mut u: f64 = rng.random();
                let last = components.len() - 1;
                for (i, (c, w)) in components.iter().zip(weights).enumerate() {
                    if u < *w || i == last {
                        return c.act(s, rng);
                    }
                    u -= w;
                }
                unreachable!("mixture has at least one component")
            }
        }
    }
}

/// Output of online behavior training: the medium and expert policies, the
/// replay stream that led to the medium policy, and reference returns.
#[derive(Debug, Clone)]
pub struct BehaviorArtifacts {
    pub env_id: String,
    pub medium: SquashedGaussianPolicy,
    pub expert: SquashedGaussianPolicy,
    /// Every environment transition collected before the medium snapshot.
    pub replay: Vec<Transition>,
    pub medium_return: f64,
    pub expert_return: f64,
    pub random_return: f64,
}

fn collect<A: Actor + ?Sized>(
    env: &ContinuousEnv,
    actor: &A,
    n: usize,
    rng: &mut SeededRng,
    out: &mut Vec<Transition>,
) -> Result<()> {
    let target = out.len() + n;
    while out.len() < target {
        let mut episode = Vec::new();
        run_episode(env, actor, rng, |step| episode.push(Transition::from_step(&step)))?;
        let take = (target - out.len()).min(episode.len());
        out.extend(episode.into_iter().take(take));
    }
    Ok(())
}

/// Generates exactly `n_steps` transitions of the given regime.
///
/// `medium` and `medium-expert` roll out the stored stochastic policies;
/// `medium-replay` uses the online replay stream up to the medium snapshot
/// (its most recent `n_steps` records), topped up with medium-policy rollouts
/// when that stream is shorter than requested.
pub fn generate_dataset(
    env: &ContinuousEnv,
    tag: BehaviorTag,
    n_steps: usize,
    seed: u64,
    behavior: Option<&BehaviorArtifacts>,
) -> Result<TransitionDataset> {
    let behavior = match (tag.needs_behavior_checkpoint(), behavior) {
        (true, None) => {
            return Err(MoanError::Missing(format!(
                "the `{}` regime needs medium/expert policies; produce them with \
                 `moan gen-data --train-behavior` (online SAC on {}) and pass the \
                 behavior checkpoint via `dataset.behavior_path`",
                tag.as_str(),
                env.id()
            )))
        }
        (_, b) => b,
    };
    if let Some(b) = behavior {
        if b.env_id != env.id() {
            return Err(MoanError::Config(format!(
                "behavior checkpoint is for {}, dataset requested for {}",
                b.env_id,
                env.id()
            )));
        }
    }
    let mut rng = substream(seed, tag.as_str(), 0);
    let mut records = Vec::with_capacity(n_steps);
    match tag {
        BehaviorTag::Random => {
            let actor = BehaviorPolicy::UniformRandom {
                action_dim: env.action_dim(),
            };
            collect(env, &actor, n_steps, &mut rng, &mut records)?;
        }
        BehaviorTag::Medium => {
            let b = behavior.expect("checked above");
            collect(env, &Stochastic(&b.medium), n_steps, &mut rng, &mut records)?;
        }
        BehaviorTag::MediumReplay => {
            let b = behavior.expect("checked above");
            let skip = b.replay.len().saturating_sub(n_steps);
            records.extend(b.replay[skip..].iter().cloned());
            let missing = n_steps - records.len();
            collect(env, &Stochastic(&b.medium), missing, &mut rng, &mut records)?;
        }
        BehaviorTag::MediumExpert => {
            let b = behavior.expect("checked above");
            let half = n_steps / 2;
            collect(env, &Stochastic(&b.medium), n_steps - half, &mut rng, &mut records)?;
            collect(env, &Stochastic(&b.expert), half, &mut rng, &mut records)?;
        }
    }
    let mut ds = TransitionDataset::from_records(
        env.id(),
        env.state_dim(),
        env.action_dim(),
        tag,
        seed,
        records,
    )?;
    if let Some(b) = behavior {
        ds.header.expert_return = Some(b.expert_return);
        ds.header.medium_return = Some(b.medium_return);
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::pointmass::{segments_intersect, ARENA};
    use crate::env::{env_step_count, evaluate_policy, EnvKind};
    use crate::nn::Activation;
    use crate::rng::seeded;

    fn fake_behavior(env: &ContinuousEnv) -> BehaviorArtifacts {
        let mut rng = seeded(3);
        let medium =
            SquashedGaussianPolicy::new(env.state_dim(), env.action_dim(), &[8], Activation::Tanh, &mut rng)
                .unwrap();
        let expert =
            SquashedGaussianPolicy::new(env.state_dim(), env.action_dim(), &[8], Activation::Tanh, &mut rng)
                .unwrap();
        let mut replay = Vec::new();
        collect(
            env,
            &BehaviorPolicy::UniformRandom { action_dim: 2 },
            700,
            &mut rng,
            &mut replay,
        )
        .unwrap();
        BehaviorArtifacts {
            env_id: env.id().into(),
            medium,
            expert,
            replay,
            medium_return: 1.0,
            expert_return: 3.0,
            random_return: 0.0,
        }
    }

    #[test]
    fn random_regime_actions_uniform_in_box() {
        let env = ContinuousEnv::pointmass2d();
        let ds = generate_dataset(&env, BehaviorTag::Random, 10_000, 1, None).unwrap();
        assert_eq!(ds.len(), 10_000);
        assert_eq!(ds.header.count, 10_000);
        assert!(ds.records.iter().all(|t| t.a.iter().all(|a| (-1.0..=1.0).contains(a))));
        // uniform on [-1, 1]: mean 0, std 1/√3
        for d in 0..2 {
            assert!(ds.header.action_mean[d].abs() < 0.03);
            assert!((ds.header.action_std[d] - 1.0 / 3f64.sqrt()).abs() < 0.02);
        }
    }

    #[test]
    fn medium_expert_is_an_even_split() {
        let env = ContinuousEnv::pointmass2d();
        let b = fake_behavior(&env);
        let ds = generate_dataset(&env, BehaviorTag::MediumExpert, 10_000, 2, Some(&b)).unwrap();
        assert_eq!(ds.len(), 10_000);
        // regenerate each half with the documented stream order
        let mut rng = substream(2, "medium-expert", 0);
        let mut medium = Vec::new();
        collect(&env, &Stochastic(&b.medium), 5_000, &mut rng, &mut medium).unwrap();
        assert_eq!(&ds.records[..5_000], medium.as_slice());
        assert_eq!(ds.header.expert_return, Some(3.0));
    }

    #[test]
    fn medium_replay_uses_replay_stream_then_tops_up() {
        let env = ContinuousEnv::pointmass2d();
        let b = fake_behavior(&env);
        let ds = generate_dataset(&env, BehaviorTag::MediumReplay, 500, 2, Some(&b)).unwrap();
        assert_eq!(ds.records.as_slice(), &b.replay[200..]);
        let ds = generate_dataset(&env, BehaviorTag::MediumReplay, 1_000, 2, Some(&b)).unwrap();
        assert_eq!(ds.len(), 1_000);
        assert_eq!(&ds.records[..700], b.replay.as_slice());
    }

    #[test]
    fn missing_checkpoint_error_explains_how_to_fix() {
        let env = ContinuousEnv::pointmass2d();
        let err = generate_dataset(&env, BehaviorTag::Medium, 10, 0, None).unwrap_err();
        assert!(err.to_string().contains("--train-behavior"), "{err}");
    }

    #[test]
    fn generation_is_pure() {
        let env = ContinuousEnv::pendulum1d();
        let a = generate_dataset(&env, BehaviorTag::Random, 3_000, 9, None).unwrap();
        let b = generate_dataset(&env, BehaviorTag::Random, 3_000, 9, None).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&env, BehaviorTag::Random, 3_000, 10, None).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn dataset_respects_bounds_and_done_semantics() {
        let env = ContinuousEnv::pointmass2d();
        let ds = generate_dataset(&env, BehaviorTag::Random, 20_000, 4, None).unwrap();
        let (lo, hi) = env.state_box();
        let mut t_in_episode = 0;
        for t in &ds.records {
            for (k, v) in t.s.iter().enumerate() {
                assert!(f64::from(*v) >= lo[k] - 1e-6 && f64::from(*v) <= hi[k] + 1e-6);
            }
            t_in_episode += 1;
            if t.terminal {
                assert!(t.done);
                assert!(t.r <= 0.0, "terminal states are wall contacts");
            }
            if t.done {
                if !t.terminal {
                    assert_eq!(t_in_episode, env.horizon, "non-terminal ends are time limits");
                }
                t_in_episode = 0;
            }
        }
    }

    #[test]
    fn wall_is_never_crossed_under_fuzz() {
        let env = ContinuousEnv::pointmass2d();
        let pm = &env.pointmass;
        let (w1, w2) = pm.wall();
        let mut rng = seeded(77);
        for _ in 0..100_000 {
            let mut x: f64 = rng.random_range(-ARENA..ARENA);
            let y: f64 = rng.random_range(-ARENA..ARENA);
            if x == pm.wall_x {
                x += 1e-3;
            }
            let s = [x, y, rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
            let a = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let out = env.step(&s, &a, &mut rng).unwrap();
            assert!(
                !segments_intersect([s[0], s[1]], [out.s_next[0], out.s_next[1]], w1, w2),
                "{s:?} -> {:?}",
                out.s_next
            );
        }
    }

    #[test]
    fn uniform_random_return_matches_large_sample() {
        let env = ContinuousEnv {
            kind: EnvKind::Pointmass2d,
            horizon: 50,
            ..ContinuousEnv::default()
        };
        let actor = BehaviorPolicy::UniformRandom { action_dim: 2 };
        let small = evaluate_policy(&env, &actor, 100, 1).unwrap();
        let big = evaluate_policy(&env, &actor, 10_000, 2).unwrap();
        let se = (small.std_return.powi(2) / 100.0 + big.std_return.powi(2) / 10_000.0).sqrt();
        assert!(
            (small.mean_return - big.mean_return).abs() < 3.0 * se + 1e-12,
            "{} vs {}",
            small.mean_return,
            big.mean_return
        );
    }

    #[test]
    fn mixture_weights_validated() {
        let r = BehaviorPolicy::UniformRandom { action_dim: 1 };
        assert!(BehaviorPolicy::mixture(vec![r.clone(), r.clone()], vec![0.5, 0.6]).is_err());
        assert!(BehaviorPolicy::mixture(vec![r.clone(), r], vec![0.25, 0.75]).is_ok());
        let _ = env_step_count();
    }
}
