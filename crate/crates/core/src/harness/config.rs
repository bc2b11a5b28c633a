//! TOML experiment configuration.
//!
//! Every key is optional; omitted keys take the documented defaults and
//! unknown keys are rejected. `reference_toml` renders the full default
//! configuration with one comment per key.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::format::sha256_hex;
use crate::env::{BehaviorTag, ContinuousEnv};
use crate::error::{MoanError, Result};
use crate::model::ModelTrainConfig;
use crate::penalty::PenaltyConfig;
use crate::sac::{OnlineConfig, PolicyTrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub tag: BehaviorTag,
    pub size: usize,
    pub seed: u64,
    /// Existing canonical dataset file; when set, nothing is generated.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Existing behavior checkpoint for the medium-based regimes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub behavior_path: Option<PathBuf>,
    /// Train the behavior policies online when a regime needs them and no
    /// `behavior_path` is given.
    pub train_behavior: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            tag: BehaviorTag::Medium,
            size: 20_000,
            seed: 0,
            path: None,
            behavior_path: None,
            train_behavior: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run_id: String,
    /// Output root; the run writes into `<out_dir>/<run_id>`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub env: ContinuousEnv,
    pub dataset: DatasetConfig,
    pub behavior: OnlineConfig,
    pub model: ModelTrainConfig,
    pub penalty: PenaltyConfig,
    pub policy: PolicyTrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            run_id: "moan".into(),
            out_dir: None,
            env: ContinuousEnv::default(),
            dataset: DatasetConfig::default(),
            behavior: OnlineConfig::default(),
            model: ModelTrainConfig::default(),
            penalty: PenaltyConfig::default(),
            policy: PolicyTrainConfig::default(),
        }
    }
}

/// SHA-256 of the canonical JSON encoding of `value`.
pub fn hash_of<T: Serialize + ?Sized>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("configs serialize"))
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

impl ExperimentConfig {
    /// Parses TOML text; `origin` names the source in error messages.
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let at = e
                .span()
                .map(|s| {
                    let (l, c) = line_col(text, s.start);
                    format!(":{l}:{c}")
                })
                .unwrap_or_default();
            MoanError::Config(format!("{origin}{at}: {}", e.message()))
        })
    }

    /// Fully defaulted TOML rendering; parsing it back yields `self`.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize to TOML")
    }

    /// Sets the model and policy seeds. The dataset (and the behavior
    /// policies behind it) are fixed inputs of an experiment and keep theirs.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.policy.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty()
            || !self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            || self.run_id.starts_with('.')
        {
            return Err(MoanError::Config(format!(
                "run_id `{}` must be non-empty and use only letters, digits, `-`, `_` and `.`",
                self.run_id
            )));
        }
        self.env.validate()?;
        if self.dataset.size == 0 {
            return Err(MoanError::Config("dataset.size must be positive".into()));
        }
        for (key, p) in [
            ("dataset.path", &self.dataset.path),
            ("dataset.behavior_path", &self.dataset.behavior_path),
        ] {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(MoanError::Config(format!("{key}: {} does not exist", p.display())));
                }
            }
        }
        self.behavior.validate()?;
        self.model.validate()?;
        self.penalty.validate()?;
        self.policy.validate()?;
        Ok(())
    }

    /// Identity of the behavior policies trained online.
    pub fn behavior_key(&self) -> String {
        hash_of(&("behavior", &self.env, &self.behavior))
    }

    /// Identity of the generated dataset (`None` for an external file).
    pub fn dataset_key(&self) -> Option<String> {
        if self.dataset.path.is_some() {
            return None;
        }
        let d = &self.dataset;
        let behavior = if d.tag.needs_behavior_checkpoint() {
            match &d.behavior_path {
                Some(p) => Some(std::fs::read(p).map(|b| sha256_hex(&b)).unwrap_or_default()),
                None => Some(self.behavior_key()),
            }
        } else {
            None
        };
        Some(hash_of(&("dataset", &self.env, d.tag, d.size, d.seed, behavior)))
    }

    pub fn model_key(&self, dataset_id: &str) -> String {
        hash_of(&("model", dataset_id, &self.model))
    }

    pub fn run_key(&self, model_key: &str) -> String {
        hash_of(&("run", model_key, &self.env, &self.penalty, &self.policy))
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| MoanError::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg = ExperimentConfig::from_toml(&text, &path.display().to_string())?;
    cfg.validate()?;
    Ok(cfg)
}

/// `(table, key, description)` for every configuration key.
const KEY_DOCS: &[(&str, &str, &str)] = &[
    ("", "run_id", "Name of the run directory under the output root."),
    ("", "out_dir", "Output root (optional). The CLI's --out and MOAN_OUT_DIR take precedence."),
    ("env", "kind", "Environment: \"pointmass2d\" or \"pendulum1d\"."),
    ("env", "horizon", "Episode length in steps."),
    ("env", "gamma", "Discount of the environment (informational; learners use their own)."),
    ("env", "noise_std", "Std of the Gaussian dynamics noise per state unit."),
    ("env.pointmass", "dt", "Integration step."),
    ("env.pointmass", "damping", "Velocity retained per step."),
    ("env.pointmass", "gain", "Velocity added per unit of action."),
    ("env.pointmass", "max_speed", "Speed bound per axis."),
    ("env.pointmass", "wall_x", "x coordinate of the vertical wall."),
    ("env.pointmass", "wall_top", "The wall spans y in [-1, wall_top]; the gap above it is the only way through."),
    ("env.pointmass", "goal", "Goal position."),
    ("env.pointmass", "start_low", "Lower corner of the uniform start region."),
    ("env.pointmass", "start_high", "Upper corner of the uniform start region."),
    ("env.pointmass", "crash_penalty", "Reward subtracted on wall contact."),
    ("env.pointmass", "crash_terminal", "Wall contact ends the episode (absorbing trap)."),
    ("env.pointmass", "reward_scale", "Geodesic distance to the goal that maps to zero reward."),
    ("env.pendulum", "mass", "Rod mass."),
    ("env.pendulum", "length", "Rod length."),
    ("env.pendulum", "gravity", "Gravitational acceleration."),
    ("env.pendulum", "dt", "Integration step."),
    ("env.pendulum", "max_speed", "Angular speed bound."),
    ("env.pendulum", "max_torque", "Torque at action 1."),
    ("env.pendulum", "angle_jitter", "Reset angle is pi + U(-angle_jitter, angle_jitter)."),
    ("env.pendulum", "speed_jitter", "Reset angular speed is U(-speed_jitter, speed_jitter)."),
    ("dataset", "tag", "Data regime: random, medium, medium-replay or medium-expert."),
    ("dataset", "size", "Number of transitions."),
    ("dataset", "seed", "Seed of the data collection stream."),
    ("dataset", "path", "Existing dataset file to use instead of generating one (optional)."),
    ("dataset", "behavior_path", "Existing behavior checkpoint for the medium-based regimes (optional)."),
    ("dataset", "train_behavior", "Train behavior policies online when a regime needs them and no checkpoint is given."),
    ("behavior", "gamma", "Discount of the online behavior learner."),
    ("behavior", "tau", "Target-critic averaging rate."),
    ("behavior", "lr_actor", "Actor learning rate."),
    ("behavior", "lr_critic", "Critic learning rate."),
    ("behavior", "lr_temperature", "Entropy-temperature learning rate."),
    ("behavior", "init_log_alpha", "Initial log temperature."),
    ("behavior", "hidden", "Hidden layer widths of actor and critics."),
    ("behavior", "activation", "Hidden activation: relu or tanh."),
    ("behavior", "batch_size", "Minibatch size."),
    ("behavior", "total_steps", "Environment steps of online training."),
    ("behavior", "warmup_steps", "Uniform-random steps before learning starts."),
    ("behavior", "eval_every", "Steps between evaluations (each evaluation is a snapshot candidate)."),
    ("behavior", "eval_episodes", "Episodes per evaluation."),
    ("behavior", "seed", "Seed of online training."),
    ("model", "ensemble_size", "Number of Gaussian members N."),
    ("model", "hidden", "Hidden widths of each member."),
    ("model", "activation", "Hidden activation: relu or tanh."),
    ("model", "disc_hidden", "Hidden widths of the discriminator."),
    ("model", "alpha", "Weight of the adversarial term in the generator objective."),
    ("model", "lr_gen", "Generator learning rate."),
    ("model", "lr_disc", "Discriminator learning rate."),
    ("model", "batch_size", "Minibatch size."),
    ("model", "max_epochs", "Upper bound on training epochs."),
    ("model", "holdout_fraction", "Fraction of the data held out for early stopping, in (0, 0.5]."),
    ("model", "patience", "Epochs without holdout improvement before stopping."),
    ("model", "disc_steps_per_gen_step", "Discriminator ascent steps per generator step."),
    ("model", "generator_loss", "saturating (log(1 - D)) or non_saturating (-log D)."),
    ("model", "literal_signs", "Apply the generator step as ascent. Diverges; kept for reproduction only."),
    ("model", "seed", "Seed of model training (set by --seed)."),
    ("penalty", "eta", "Penalty weight. Penalty terms are in normalized units, so eta absorbs the reward scale."),
    ("penalty", "mode", "discrepancy (u = 1 - D) or literal (u = D)."),
    ("penalty", "sigma_agg", "max_member_std_norm, chosen_member_std_norm or mean_member_std_norm."),
    ("penalty", "disc_samples", "Model samples averaged inside the discriminator term."),
    ("policy", "gamma", "Discount of policy optimization."),
    ("policy", "tau", "Target-critic averaging rate."),
    ("policy", "lr_actor", "Actor learning rate."),
    ("policy", "lr_critic", "Critic learning rate."),
    ("policy", "lr_temperature", "Entropy-temperature learning rate."),
    ("policy", "init_log_alpha", "Initial log temperature."),
    ("policy", "hidden", "Hidden layer widths of actor and critics."),
    ("policy", "activation", "Hidden activation: relu or tanh."),
    ("policy", "batch_size", "Minibatch size."),
    ("policy", "real_fraction", "Share of every minibatch drawn from the dataset (rounded up)."),
    ("policy", "rollout_horizon", "Length h of model branch rollouts."),
    ("policy", "rollouts_per_epoch", "Branch rollouts started per epoch."),
    ("policy", "epochs", "Training epochs; the policy is evaluated after each."),
    ("policy", "updates_per_epoch", "Gradient updates per epoch."),
    ("policy", "model_retain_epochs", "Epochs of rollouts kept in the model buffer."),
    ("policy", "eval_episodes", "Evaluation episodes in the true environment."),
    ("policy", "seed", "Seed of policy optimization (set by --seed)."),
];

/// The default configuration as commented TOML. Parsing it yields the
/// defaults; every key carries its description.
pub fn reference_toml() -> String {
    let defaults = ExperimentConfig::default().to_toml();
    let mut out = String::from(
        "# Default experiment configuration.\n\
         #\n\
         # Every key is optional; unknown keys are errors. The defaults are\n\
         # desk-scale substitutes sized for a single CPU core, not published\n\
         # per-environment hyperparameters.\n\
         #\n\
         # Optional keys without a default (shown commented out):\n\
         #   out_dir = \"runs\"\n\
         #   [dataset] path = \"data.bin\", behavior_path = \"behavior.ckpt\"\n\n",
    );
    let mut table = String::new();
    for line in defaults.lines() {
        let trimmed = line.trim();
        if let Some(name) = trimmed.strip_prefix('[').and_then(|t| t.strip_suffix(']')) {
            table = name.to_string();
            out.push_str(line);
            out.push('\n');
            continue;
        }
        if let Some((key, _)) = trimmed.split_once(" = ") {
            if let Some((_, _, doc)) = KEY_DOCS.iter().find(|(t, k, _)| *t == table && *k == key) {
                let _ = writeln!(out, "# {doc}");
            }
        }
        out.push_str(line);
        out.push('\n');
    }
    out
}
