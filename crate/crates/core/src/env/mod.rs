//! Ground-truth environments, behavior policies and offline dataset generation.

mod dataset;
pub mod pendulum;
pub mod pointmass;

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{MoanError, Result};
use crate::rng::{substream, SeededRng};

pub use dataset::{
    generate_dataset, BehaviorArtifacts, BehaviorPolicy, BehaviorTag, DatasetHeader, Transition,
    TransitionDataset, STD_FLOOR,
};
pub use pendulum::Pendulum1d;
pub use pointmass::PointMass2d;

thread_local! {
    static ENV_STEPS: Cell<u64> = const { Cell::new(0) };
}

/// Number of `ContinuousEnv::step` calls made on the current thread.
pub fn env_step_count() -> u64 {
    ENV_STEPS.with(Cell::get)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Pointmass2d,
    Pendulum1d,
}

impl EnvKind {
    pub fn id(self) -> &'static str {
        match self {
            EnvKind::Pointmass2d => "pointmass2d",
            EnvKind::Pendulum1d => "pendulum1d",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub s_next: Vec<f64>,
    pub r: f64,
    pub done: bool,
    pub action_clipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContinuousEnv {
    pub kind: EnvKind,
    pub horizon: usize,
    pub gamma: f64,
    /// Std of the Gaussian transition noise: on every state component for
    /// the point mass, on the angular speed for the pendulum.
    pub noise_std: f64,
    pub pointmass: PointMass2d,
    pub pendulum: Pendulum1d,
}

impl Default for ContinuousEnv {
    fn default() -> Self {
        ContinuousEnv {
            kind: EnvKind::Pointmass2d,
            horizon: 200,
            gamma: 0.99,
            noise_std: 0.01,
            pointmass: PointMass2d::default(),
            pendulum: Pendulum1d::default(),
        }
    }
}

impl ContinuousEnv {
    pub fn pointmass2d() -> Self {
        ContinuousEnv::default()
    }

    pub fn pendulum1d() -> Self {
        ContinuousEnv {
            kind: EnvKind::Pendulum1d,
            ..ContinuousEnv::default()
        }
    }

    pub fn id(&self) -> &'static str {
        self.kind.id()
    }

    pub fn state_dim(&self) -> usize {
        match self.kind {
            EnvKind::Pointmass2d => 4,
            EnvKind::Pendulum1d => 3,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self.kind {
            EnvKind::Pointmass2d => 2,
            EnvKind::Pendulum1d => 1,
        }
    }

    /// Documented compact box every true state stays inside.
    pub fn state_box(&self) -> (Vec<f64>, Vec<f64>) {
        match self.kind {
            EnvKind::Pointmass2d => self.pointmass.state_box(),
            EnvKind::Pendulum1d => self.pendulum.state_box(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(MoanError::Config("env.horizon must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(MoanError::Config("env.gamma must lie in (0, 1)".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(MoanError::Config("env.noise_std must be non-negative".into()));
        }
        let pm = &self.pointmass;
        if !(pm.dt > 0.0 && pm.max_speed > 0.0 && pm.reward_scale > 0.0) {
            return Err(MoanError::Config(
                "pointmass dt, max_speed and reward_scale must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn reset(&self, rng: &mut SeededRng) -> Vec<f64> {
        match self.kind {
            EnvKind::Pointmass2d => self.pointmass.reset(rng),
            EnvKind::Pendulum1d => self.pendulum.reset(rng),
        }
    }

    /// Deterministic given the state of `rng`. Out-of-bound actions are
    /// clipped to `[-1, 1]` and flagged in the outcome.
    pub fn step(&self, s: &[f64], a: &[f64], rng: &mut SeededRng) -> Result<StepOutcome> {
        if s.len() != self.state_dim() {
            return Err(MoanError::dim("env state", self.state_dim(), s.len()));
        }
        if a.len() != self.action_dim() {
            return Err(MoanError::dim("env action", self.action_dim(), a.len()));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(MoanError::NonFinite("env state".into()));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(MoanError::NonFinite("env action".into()));
        }
        ENV_STEPS.with(|c| c.set(c.get() + 1));
        let clipped: Vec<f64> = a.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        let action_clipped = clipped != a;
        let mut out = match self.kind {
            EnvKind::Pointmass2d => self.pointmass.step(s, &clipped, self.noise_std, rng),
            EnvKind::Pendulum1d => self.pendulum.step(s, &clipped, self.noise_std, rng),
        };
        out.action_clipped = action_clipped;
        Ok(out)
    }
}

/// Anything that maps a state to an action.
pub trait Actor {
    fn act(&self, s: &[f64], rng: &mut SeededRng) -> Vec<f64>;
}

/// One recorded step of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStep {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub s_next: Vec<f64>,
    pub r: f64,
    /// Terminal state or last step of the horizon.
    pub done: bool,
    /// The environment itself ended the episode (not the time limit).
    pub terminal: bool,
}

/// Runs one episode of at most `horizon` steps, calling `visit` on each step.
pub fn run_episode<A: Actor + ?Sized>(
    env: &ContinuousEnv,
    actor: &A,
    rng: &mut SeededRng,
    mut visit: impl FnMut(EpisodeStep),
) -> Result<f64> {
    let mut s = env.reset(rng);
    let mut total = 0.0;
    for t in 0..env.horizon {
        let a: Vec<f64> = actor
            .act(&s, rng)
            .into_iter()
            .map(|v| v.clamp(-1.0, 1.0))
            .collect();
        let out = env.step(&s, &a, rng)?;
        total += out.r;
        let done = out.done || t + 1 == env.horizon;
        let terminal = out.done;
        visit(EpisodeStep {
            s: std::mem::take(&mut s),
            a,
            s_next: out.s_next.clone(),
            r: out.r,
            done,
            terminal,
        });
        if terminal {
            break;
        }
        s = out.s_next;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalStats {
    pub mean_return: f64,
    pub std_return: f64,
    pub returns: Vec<f64>,
}

/// Undiscounted episode-return statistics over `episodes` seeded episodes.
pub fn evaluate_policy<A: Actor + ?Sized>(
    env: &ContinuousEnv,
    actor: &A,
    episodes: usize,
    seed: u64,
) -> Result<EvalStats> {
    if episodes == 0 {
        return Err(MoanError::Config("episodes must be at least 1".into()));
    }
    let mut returns = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut rng = substream(seed, "evaluate", ep as u64);
        returns.push(run_episode(env, actor, &mut rng, |_| {})?);
    }
    let n = returns.len() as f64;
    let mean_return = returns.iter().sum::<f64>() / n;
    let std_return = (returns.iter().map(|r| (r - mean_return).powi(2)).sum::<f64>() / n).sqrt();
    Ok(EvalStats {
        mean_return,
        std_return,
        returns,
    })
}

/// `100 · (J − J_random) / (J_expert − J_random)`.
pub fn normalized_score(j: f64, j_random: f64, j_expert: f64) -> Result<f64> {
    let span = j_expert - j_random;
    if !span.is_finite() || span.abs() < 1e-12 {
        return Err(MoanError::Domain(format!(
            "degenerate reference returns: random {j_random}, expert {j_expert}"
        )));
    }
    Ok(100.0 * (j - j_random) / span)
}
