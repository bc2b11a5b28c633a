//! One experiment run: dataset → adversarial model → penalized policy.
//!
//! Every stage output is keyed by the hash of everything it depends on, so a
//! re-run reuses matching artifacts from the run directory (resume) or from a
//! shared cache directory, and only recomputes what changed. A run directory
//! is guarded by a `.lock` file and summarized by an atomically written
//! `manifest.json`.

use std::fs::{self, OpenOptions};
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::format::{
    artifact_config_hash, dataset_records_sha256, file_sha256, load_behavior, load_dataset, load_model,
    save_behavior, save_dataset, save_model, save_policy, write_atomic,
};
use super::metrics::MetricsWriter;
use crate::env::{generate_dataset, normalized_score, BehaviorArtifacts, TransitionDataset};
use crate::error::{MoanError, Result};
use crate::model::{train_adversarial, DynamicsEnsemble, Discriminator};
use crate::sac::{train_online, train_policy};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";
pub const BEHAVIOR_FILE: &str = "behavior.ckpt";
pub const DATASET_FILE: &str = "dataset.bin";
pub const MODEL_FILE: &str = "model.ckpt";
pub const POLICY_FILE: &str = "policy.ckpt";
pub const RESULT_FILE: &str = "result.json";
pub const CONFIG_FILE: &str = "config.toml";

/// Pipeline stages, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Data,
    Model,
    Policy,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Last stage to execute.
    pub until: Option<Stage>,
    /// Shared directory for behavior/dataset/model artifacts across runs.
    pub cache_dir: Option<PathBuf>,
    /// Use this trained model instead of the model stage.
    pub model_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
    /// False for outputs of a stage that did not finish.
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub behavior: u64,
    pub dataset: u64,
    pub model: u64,
    pub policy: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    /// Deterministic evaluation return after the last epoch.
    pub final_return: f64,
    /// Evaluation return after every epoch.
    pub eval_returns: Vec<f64>,
    /// Mean complete-episode return of the dataset.
    pub behavior_return: Option<f64>,
    pub expert_return: Option<f64>,
    pub random_return: Option<f64>,
    /// `100 · (J − J_random) / (J_expert − J_random)` when both references exist.
    pub normalized_final: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub status: RunStatus,
    pub stage: Stage,
    /// Identity of the last requested stage's output.
    pub config_hash: String,
    pub dataset_id: String,
    pub model_key: String,
    pub code_version: String,
    pub seeds: RunSeeds,
    pub started_unix: f64,
    pub ended_unix: Option<f64>,
    pub artifacts: Vec<ArtifactEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub results: Option<RunResults>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunManifest {
    pub fn read(run_dir: &Path) -> Result<RunManifest> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| MoanError::Missing(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| MoanError::Format {
            path,
            detail: e.to_string(),
        })
    }

    fn write(&self, run_dir: &Path) -> Result<()> {
        write_atomic(&run_dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(self)?)
    }
}

pub fn code_version() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

/// Checks that every valid artifact listed in the manifest still exists with
/// the recorded checksum.
pub fn verify_manifest(run_dir: &Path) -> Result<RunManifest> {
    let manifest = RunManifest::read(run_dir)?;
    for a in manifest.artifacts.iter().filter(|a| a.valid) {
        let path = run_dir.join(&a.file);
        if !path.is_file() {
            return Err(MoanError::Missing(format!("{} listed in the manifest", path.display())));
        }
        let sha = file_sha256(&path)?;
        if sha != a.sha256 {
            return Err(MoanError::Format {
                path,
                detail: format!("checksum {sha} differs from the manifest's {}", a.sha256),
            });
        }
    }
    Ok(manifest)
}

fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Exclusive ownership of a run directory; released on drop.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(run_dir: &Path) -> Result<RunLock> {
        let path = run_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock(path)),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(MoanError::Config(format!(
                "{} is locked by another run; delete {} if no run is active",
                run_dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn copy_atomic(from: &Path, to: &Path) -> Result<()> {
    write_atomic(to, &fs::read(from)?)
}

/// Artifact reuse across the run directory and the shared cache.
struct Store<'a> {
    run_dir: &'a Path,
    cache: Option<&'a Path>,
}

impl Store<'_> {
    fn cache_entry(&self, kind: &str, key: &str) -> Option<PathBuf> {
        self.cache.map(|c| c.join(format!("{kind}-{}", &key[..16.min(key.len())])))
    }

    /// Makes `files[0]` (plus companions) with identity `key` available in
    /// the run directory without recomputation, if possible.
    fn reuse(&self, kind: &str, key: &str, files: &[&str]) -> bool {
        let matches = |p: &Path| p.is_file() && artifact_config_hash(p).map(|h| h == key).unwrap_or(false);
        if matches(&self.run_dir.join(files[0])) {
            return true;
        }
        if let Some(entry) = self.cache_entry(kind, key) {
            if matches(&entry.join(files[0])) {
                let copied = files.iter().all(|f| {
                    let src = entry.join(f);
                    !src.is_file() || copy_atomic(&src, &self.run_dir.join(f)).is_ok()
                });
                return copied;
            }
        }
        false
    }

    fn publish(&self, kind: &str, key: &str, files: &[&str]) -> Result<()> {
        if let Some(entry) = self.cache_entry(kind, key) {
            fs::create_dir_all(&entry)?;
            // Companions first so a visible main file implies a full entry.
            for f in files.iter().rev() {
                let src = self.run_dir.join(f);
                if src.is_file() {
                    copy_atomic(&src, &entry.join(f))?;
                }
            }
        }
        Ok(())
    }
}

struct Tracker {
    manifest: RunManifest,
    produced: Vec<(String, bool)>,
}

impl Tracker {
    fn mark(&mut self, file: &str, valid: bool) {
        self.produced.retain(|(f, _)| f != file);
        self.produced.push((file.to_string(), valid));
    }

    /// Writes the manifest; outputs of an unfinished stage stay marked invalid.
    fn finish(&mut self, run_dir: &Path, status: RunStatus, error: Option<String>) -> Result<()> {
        let mut artifacts = Vec::new();
        for (file, valid) in &self.produced {
            let path = run_dir.join(file);
            if path.is_file() {
                artifacts.push(ArtifactEntry {
                    file: file.clone(),
                    sha256: file_sha256(&path)?,
                    bytes: fs::metadata(&path)?.len(),
                    valid: *valid,
                });
            }
        }
        self.manifest.artifacts = artifacts;
        self.manifest.status = status;
        self.manifest.error = error;
        self.manifest.ended_unix = Some(now_unix());
        self.manifest.write(run_dir)
    }
}

/// Identities of the stage outputs, computed without doing any work.
struct Keys {
    dataset: String,
    model: String,
    run: String,
}

fn stage_keys(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Keys> {
    let dataset = match (&cfg.dataset.path, cfg.dataset_key()) {
        (Some(p), _) => dataset_records_sha256(p)?,
        (None, Some(k)) => k,
        (None, None) => unreachable!("a generated dataset always has a key"),
    };
    let model = match &opts.model_path {
        Some(p) => artifact_config_hash(p)?,
        None => cfg.model_key(&dataset),
    };
    let run = cfg.run_key(&model);
    Ok(Keys { dataset, model, run })
}

/// Runs the pipeline for `cfg` in `<out_root>/<run_id>`. A directory whose
/// manifest already records a complete run with the same identity is
/// returned as is.
pub fn run(cfg: &ExperimentConfig, out_root: &Path, opts: &RunOptions) -> Result<RunManifest> {
    cfg.validate()?;
    let until = opts.until.unwrap_or(Stage::Policy);
    let keys = stage_keys(cfg, opts)?;
    let config_hash = match until {
        Stage::Data => keys.dataset.clone(),
        Stage::Model => keys.model.clone(),
        Stage::Policy => keys.run.clone(),
    };
    let run_dir = out_root.join(&cfg.run_id);
    fs::create_dir_all(&run_dir)?;
    let _lock = RunLock::acquire(&run_dir)?;

    if let Ok(existing) = verify_manifest(&run_dir) {
        if existing.status == RunStatus::Complete && existing.config_hash == config_hash && existing.stage == until {
            return Ok(existing);
        }
    }

    let mut tracker = Tracker {
        manifest: RunManifest {
            run_id: cfg.run_id.clone(),
            status: RunStatus::Running,
            stage: until,
            config_hash,
            dataset_id: keys.dataset.clone(),
            model_key: keys.model.clone(),
            code_version: code_version(),
            seeds: RunSeeds {
                behavior: cfg.behavior.seed,
                dataset: cfg.dataset.seed,
                model: cfg.model.seed,
                policy: cfg.policy.seed,
            },
            started_unix: now_unix(),
            ended_unix: None,
            artifacts: Vec::new(),
            results: None,
            error: None,
        },
        produced: Vec::new(),
    };
    let _ = fs::remove_file(run_dir.join(MANIFEST_FILE));
    write_atomic(&run_dir.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    tracker.mark(CONFIG_FILE, true);

    let store = Store {
        run_dir: &run_dir,
        cache: opts.cache_dir.as_deref(),
    };
    match execute(cfg, opts, until, &keys, &store, &mut tracker) {
        Ok(results) => {
            tracker.manifest.results = results;
            tracker.finish(&run_dir, RunStatus::Complete, None)?;
            Ok(tracker.manifest)
        }
        Err(e) => {
            tracker.finish(&run_dir, RunStatus::Failed, Some(e.to_string()))?;
            Err(e)
        }
    }
}

fn obtain_behavior(cfg: &ExperimentConfig, store: &Store, tracker: &mut Tracker) -> Result<BehaviorArtifacts> {
    if let Some(p) = &cfg.dataset.behavior_path {
        return Ok(load_behavior(p, None)?.0);
    }
    let key = cfg.behavior_key();
    let files = [BEHAVIOR_FILE, "metrics-behavior.csv"];
    if !store.reuse("behavior", &key, &files) {
        if !cfg.dataset.train_behavior {
            return Err(MoanError::Missing(format!(
                "the `{}` regime needs behavior policies: set dataset.behavior_path or enable \
                 dataset.train_behavior",
                cfg.dataset.tag.as_str()
            )));
        }
        tracker.mark(files[1], false);
        tracker.mark(files[0], false);
        let report = train_online(&cfg.env, &cfg.behavior)?;
        let mut metrics = MetricsWriter::create(&store.run_dir.join(files[1]), &cfg.run_id, "behavior")?;
        for (step, ret) in &report.curve {
            metrics.write(*step, &[("eval_return", *ret)])?;
        }
        save_behavior(&store.run_dir.join(files[0]), &report.artifacts, &key)?;
        store.publish("behavior", &key, &files)?;
    }
    tracker.mark(files[1], true);
    tracker.mark(files[0], true);
    Ok(load_behavior(&store.run_dir.join(files[0]), Some(&key))?.0)
}

fn obtain_dataset(
    cfg: &ExperimentConfig,
    keys: &Keys,
    store: &Store,
    tracker: &mut Tracker,
) -> Result<(TransitionDataset, Option<BehaviorArtifacts>)> {
    if let Some(p) = &cfg.dataset.path {
        let (ds, _) = load_dataset(p, None)?;
        if ds.header.env_id != cfg.env.id() {
            return Err(MoanError::Config(format!(
                "dataset {} is for {}, the config runs {}",
                p.display(),
                ds.header.env_id,
                cfg.env.id()
            )));
        }
        return Ok((ds, None));
    }
    let needs_behavior = cfg.dataset.tag.needs_behavior_checkpoint();
    let files = [DATASET_FILE];
    let mut behavior = None;
    if !store.reuse("dataset", &keys.dataset, &files) {
        if needs_behavior {
            behavior = Some(obtain_behavior(cfg, store, tracker)?);
        }
        tracker.mark(DATASET_FILE, false);
        let ds = generate_dataset(
            &cfg.env,
            cfg.dataset.tag,
            cfg.dataset.size,
            cfg.dataset.seed,
            behavior.as_ref(),
        )?;
        save_dataset(&store.run_dir.join(DATASET_FILE), &ds, &keys.dataset)?;
        store.publish("dataset", &keys.dataset, &files)?;
    } else if needs_behavior && cfg.dataset.behavior_path.is_none() {
        // Reference returns for normalized scores live with the behavior policies.
        let key = cfg.behavior_key();
        if store.reuse("behavior", &key, &[BEHAVIOR_FILE, "metrics-behavior.csv"]) {
            tracker.mark("metrics-behavior.csv", true);
            tracker.mark(BEHAVIOR_FILE, true);
            behavior = Some(load_behavior(&store.run_dir.join(BEHAVIOR_FILE), Some(&key))?.0);
        }
    }
    tracker.mark(DATASET_FILE, true);
    let (ds, _) = load_dataset(&store.run_dir.join(DATASET_FILE), Some(&keys.dataset))?;
    Ok((ds, behavior))
}

fn obtain_model(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    keys: &Keys,
    dataset: &TransitionDataset,
    store: &Store,
    tracker: &mut Tracker,
) -> Result<(DynamicsEnsemble, Discriminator)> {
    if let Some(p) = &opts.model_path {
        let (ensemble, disc, _) = load_model(p, None)?;
        return Ok((ensemble, disc));
    }
    let files = [MODEL_FILE, "metrics-model.csv"];
    if !store.reuse("model", &keys.model, &files) {
        tracker.mark(files[1], false);
        tracker.mark(files[0], false);
        let (ensemble, disc, report) = train_adversarial(dataset, &cfg.model)?;
        let mut metrics = MetricsWriter::create(&store.run_dir.join(files[1]), &cfg.run_id, "model")?;
        for e in 0..report.gen_nll.len() {
            let mse = &report.holdout_mse[e];
            metrics.write(
                e + 1,
                &[
                    ("gen_nll", report.gen_nll[e]),
                    ("gen_adv_loss", report.gen_adv_loss[e]),
                    ("disc_loss", report.disc_loss[e]),
                    ("disc_accuracy", report.disc_accuracy[e]),
                    ("holdout_mse_mean", mse.iter().sum::<f64>() / mse.len().max(1) as f64),
                ],
            )?;
        }
        save_model(&store.run_dir.join(files[0]), &ensemble, &disc, &keys.model)?;
        store.publish("model", &keys.model, &files)?;
    }
    tracker.mark(files[1], true);
    tracker.mark(files[0], true);
    // Always continue from the stored parameters so resumed and fresh runs agree.
    let (ensemble, disc, _) = load_model(&store.run_dir.join(files[0]), Some(&keys.model))?;
    Ok((ensemble, disc))
}

fn execute(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    until: Stage,
    keys: &Keys,
    store: &Store,
    tracker: &mut Tracker,
) -> Result<Option<RunResults>> {
    let (dataset, behavior) = obtain_dataset(cfg, keys, store, tracker)?;
    if until == Stage::Data {
        return Ok(None);
    }
    let (ensemble, disc) = obtain_model(cfg, opts, keys, &dataset, store, tracker)?;
    if until == Stage::Model {
        return Ok(None);
    }

    let run_dir = store.run_dir;
    tracker.mark("metrics-policy.csv", false);
    tracker.mark(POLICY_FILE, false);
    tracker.mark(RESULT_FILE, false);
    let mut agent = cfg.policy.new_agent(cfg.env.state_dim(), cfg.env.action_dim())?;
    let mut metrics = MetricsWriter::create(&run_dir.join("metrics-policy.csv"), &cfg.run_id, "policy")?;
    let report = train_policy(
        &mut agent,
        &dataset,
        &ensemble,
        &disc,
        &cfg.penalty,
        &cfg.policy,
        &cfg.env,
        |m| {
            metrics.write(
                m.epoch,
                &[
                    ("eval_return_mean", m.eval_return_mean),
                    ("eval_return_std", m.eval_return_std),
                    ("critic1_loss", m.critic1_loss),
                    ("critic2_loss", m.critic2_loss),
                    ("actor_loss", m.actor_loss),
                    ("temperature_loss", m.temperature_loss),
                    ("alpha", m.alpha),
                    ("entropy", m.entropy),
                    ("truncation_count", m.truncation_count as f64),
                    ("model_buffer_len", m.model_buffer_len as f64),
                    ("penalty_mean", m.penalty_mean),
                    ("sigma_mean", m.sigma_mean),
                    ("u_mean", m.u_mean),
                    ("shaped_reward_mean", m.shaped_reward_mean),
                ],
            )
        },
    )?;
    drop(metrics);
    tracker.mark("metrics-policy.csv", true);
    save_policy(&run_dir.join(POLICY_FILE), &agent.policy, cfg.env.id(), &keys.run)?;
    tracker.mark(POLICY_FILE, true);

    let final_return = report
        .final_return()
        .ok_or_else(|| MoanError::Domain("policy training ran no epochs".into()))?;
    let expert_return = behavior.as_ref().map(|b| b.expert_return).or(dataset.header.expert_return);
    let random_return = behavior.as_ref().map(|b| b.random_return);
    let normalized_final = match (random_return, expert_return) {
        (Some(lo), Some(hi)) => normalized_score(final_return, lo, hi).ok(),
        _ => None,
    };
    let results = RunResults {
        final_return,
        eval_returns: report.eval_returns(),
        behavior_return: dataset.mean_episode_return(),
        expert_return,
        random_return,
        normalized_final,
    };
    write_atomic(&run_dir.join(RESULT_FILE), &serde_json::to_vec_pretty(&results)?)?;
    tracker.mark(RESULT_FILE, true);
    Ok(Some(results))
}
