//! Experiment plumbing: configuration, on-disk formats, metrics, runs with
//! resume and caching, ablation sweeps and gradient checks.

pub mod config;
pub mod format;
pub mod gradients;
pub mod metrics;
pub mod run;
pub mod sweep;

pub use config::{hash_of, load_config, reference_toml, DatasetConfig, ExperimentConfig};
pub use gradients::{gradient_suite, GradientCheck};
pub use metrics::{read_metrics, MetricsRecord, MetricsWriter};
pub use run::{run, verify_manifest, RunManifest, RunOptions, RunResults, RunStatus, Stage};
pub use sweep::{ablation_sweep, read_summary, summary_path, sweep_point, SweepParam, SweepRow};
