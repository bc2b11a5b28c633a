//! `moan`: command-line entry point for datasets, model and policy training,
//! full runs, evaluation, ablation sweeps, bound checks and gradient checks.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moan::bound::{random_instance, theorem1_check};
use moan::env::evaluate_policy;
use moan::harness::format::load_policy;
use moan::harness::{
    ablation_sweep, gradient_suite, load_config, run, summary_path, ExperimentConfig, RunManifest, RunOptions, Stage,
    SweepParam,
};
use moan::sac::Deterministic;
use moan::{MoanError, Result};

#[derive(Parser, Debug)]
#[command(name = "moan", version, about = "Model-based offline policy optimization with an adversarial dynamics ensemble")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the model and policy stages.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; runs are written to `<out>/<run_id>`.
    #[arg(long, global = true, env = "MOAN_OUT_DIR")]
    out: Option<PathBuf>,
    /// Worker threads for ensemble training.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate (or reuse) the configured offline dataset.
    GenData {
        /// Train the medium/expert behavior policies online if the regime needs them.
        #[arg(long)]
        train_behavior: bool,
    },
    /// Train the adversarial dynamics ensemble on the dataset.
    TrainModel {
        /// Use this dataset file instead of generating one.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train the policy against an existing model checkpoint.
    TrainPolicy {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run the full pipeline (dataset, model, policy).
    Run {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Evaluate a policy checkpoint on the configured environment.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
    },
    /// Check the return lower bound on random tabular instances (CSV to stdout).
    BoundCheck {
        #[arg(long, default_value_t = 500)]
        trials: u64,
        #[arg(long, default_value_t = 5)]
        states: usize,
        #[arg(long, default_value_t = 3)]
        actions: usize,
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
        /// Bound on the value function's magnitude.
        #[arg(long, default_value_t = 1.0)]
        delta: f64,
    },
    /// Ablation over alpha or eta for several seeds.
    Sweep {
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
    /// Compare every analytic gradient with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load(global: &GlobalArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &global.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn out_root(global: &GlobalArgs, cfg: &ExperimentConfig) -> PathBuf {
    global
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn report(manifest: &RunManifest, root: &Path) {
    println!("run {} ({:?}) in {}", manifest.run_id, manifest.status, root.join(&manifest.run_id).display());
    for a in manifest.artifacts.iter().filter(|a| a.valid) {
        println!("  {:<22} {}", a.file, &a.sha256[..16]);
    }
    if let Some(r) = &manifest.results {
        println!("final eval return: {:.3}", r.final_return);
        if let Some(score) = r.normalized_final {
            println!("normalized score:  {score:.1}");
        }
        if let Some(b) = r.behavior_return {
            println!("dataset return:    {b:.3}");
        }
    }
}

fn stage_run(
    global: &GlobalArgs,
    mut cfg: ExperimentConfig,
    dataset: Option<PathBuf>,
    until: Stage,
    model_path: Option<PathBuf>,
) -> Result<()> {
    if dataset.is_some() {
        cfg.dataset.path = dataset;
    }
    let root = out_root(global, &cfg);
    let opts = RunOptions {
        until: Some(until),
        cache_dir: None,
        model_path,
    };
    let manifest = run(&cfg, &root, &opts)?;
    report(&manifest, &root);
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let global = &cli.global;
    if let Some(n) = global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| MoanError::Config(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::GenData { train_behavior } => {
            let mut cfg = load(global)?;
            cfg.dataset.train_behavior |= train_behavior;
            stage_run(global, cfg, None, Stage::Data, None)
        }
        Command::TrainModel { dataset } => stage_run(global, load(global)?, dataset, Stage::Model, None),
        Command::TrainPolicy { model, dataset } => {
            if !model.is_file() {
                return Err(MoanError::Missing(format!("model checkpoint {}", model.display())));
            }
            stage_run(global, load(global)?, dataset, Stage::Policy, Some(model))
        }
        Command::Run { dataset } => stage_run(global, load(global)?, dataset, Stage::Policy, None),
        Command::Eval { policy, episodes } => {
            let cfg = load(global)?;
            let (pi, env_id, _) = load_policy(&policy, None)?;
            if env_id != cfg.env.id() {
                return Err(MoanError::Config(format!(
                    "policy was trained on {env_id}, the config runs {}",
                    cfg.env.id()
                )));
            }
            let seed = global.seed.unwrap_or(cfg.policy.seed);
            let stats = evaluate_policy(&cfg.env, &Deterministic(&pi), episodes, seed)?;
            println!("episodes: {episodes}");
            println!("mean return: {:.4}", stats.mean_return);
            println!("std return:  {:.4}", stats.std_return);
            Ok(())
        }
        Command::BoundCheck {
            trials,
            states,
            actions,
            gamma,
            delta,
        } => {
            let base = global.seed.unwrap_or(0);
            let mut w = csv::Writer::from_writer(std::io::stdout().lock());
            w.write_record([
                "seed",
                "lhs",
                "rhs_literal",
                "holds_literal",
                "c_star",
                "j_model",
                "model_error_term",
                "discrepancy_term",
                "reward_scale",
            ])?;
            let mut violations = 0u64;
            for t in 0..trials {
                let seed = base + t;
                let inst = random_instance(seed, states, actions, gamma);
                let r = theorem1_check(&inst.m, &inst.m_hat, &inst.pi, &inst.pi_d, delta)?;
                violations += u64::from(!r.holds);
                w.write_record([
                    seed.to_string(),
                    format!("{:?}", r.lhs),
                    format!("{:?}", r.rhs),
                    r.holds.to_string(),
                    format!("{:?}", r.c_star),
                    format!("{:?}", r.j_model),
                    format!("{:?}", r.model_error_term),
                    format!("{:?}", r.discrepancy_term),
                    format!("{:?}", r.reward_scale),
                ])?;
            }
            w.flush()?;
            eprintln!("literal bound violated in {violations} of {trials} trials");
            Ok(())
        }
        Command::Sweep { param, values, seeds } => {
            let cfg = load(global)?;
            let root = out_root(global, &cfg);
            let rows = ablation_sweep(&cfg, param, &values, &seeds, &root)?;
            let mut out = std::io::stdout().lock();
            writeln!(out, "{param:>8} {:>6} {:>12}", "seed", "final")?;
            for r in &rows {
                writeln!(out, "{:>8} {:>6} {:>12.3}", r.value, r.seed, r.final_return)?;
            }
            writeln!(out, "summary: {}", summary_path(&root, &cfg, param).display())?;
            Ok(())
        }
        Command::Gradcheck { seeds } => {
            let mut failed = 0;
            for seed in 0..seeds {
                for c in gradient_suite(seed)? {
                    let verdict = if c.passed() { "ok" } else { "FAIL" };
                    println!(
                        "seed {seed}  {:<48} params {:>4}  max rel err {:.2e}  {verdict}",
                        c.name, c.params, c.max_relative_error
                    );
                    failed += usize::from(!c.passed());
                }
            }
            if failed > 0 {
                return Err(MoanError::Domain(format!("{failed} gradient checks failed")));
            }
            Ok(())
        }
    }
}
