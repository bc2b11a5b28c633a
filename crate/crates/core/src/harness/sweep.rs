//! Ablation sweeps over the adversarial weight α or the penalty weight η.
//!
//! Each (value, seed) pair is an ordinary run named after its α, η and seed,
//! so sweeps over different parameters that meet at the same point share the
//! run. Behavior policies, datasets and models are shared through one cache.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::format::write_atomic;
use super::run::{run, RunOptions};
use crate::error::{MoanError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Alpha,
    Eta,
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Eta => "eta",
        })
    }
}

impl FromStr for SweepParam {
    type Err = MoanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepParam::Alpha),
            "eta" => Ok(SweepParam::Eta),
            other => Err(MoanError::Config(format!("unknown sweep parameter `{other}` (alpha or eta)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub seed: u64,
    pub run_id: String,
    pub final_return: f64,
    /// Mean complete-episode return of the dataset (NaN without complete episodes).
    pub behavior_return: f64,
}

/// Location of the summary written by [`ablation_sweep`].
pub fn summary_path(out_root: &Path, base: &ExperimentConfig, param: SweepParam) -> PathBuf {
    out_root.join(&base.run_id).join(format!("summary-{param}.csv"))
}

/// Configuration of one sweep point.
pub fn sweep_point(base: &ExperimentConfig, param: SweepParam, value: f64, seed: u64) -> ExperimentConfig {
    let mut cfg = base.clone().with_seed(seed);
    match param {
        SweepParam::Alpha => cfg.model.alpha = value,
        SweepParam::Eta => cfg.penalty.eta = value,
    }
    cfg.run_id = format!("alpha{}-eta{}-seed{seed}", cfg.model.alpha, cfg.penalty.eta);
    cfg
}

/// Runs every (value, seed) point under `<out_root>/<base.run_id>/` and
/// writes `summary-<param>.csv` there.
pub fn ablation_sweep(
    base: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
    seeds: &[u64],
    out_root: &Path,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(MoanError::Config("a sweep needs at least one value and one seed".into()));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(MoanError::Config(format!("{param} = {v} must be finite and non-negative")));
    }
    base.validate()?;
    let sweep_dir = out_root.join(&base.run_id);
    let opts = RunOptions {
        cache_dir: Some(sweep_dir.join("cache")),
        ..RunOptions::default()
    };
    let mut rows = Vec::with_capacity(values.len() * seeds.len());
    for &value in values {
        for &seed in seeds {
            let cfg = sweep_point(base, param, value, seed);
            let manifest = run(&cfg, &sweep_dir, &opts)?;
            let results = manifest
                .results
                .ok_or_else(|| MoanError::Missing(format!("results of run {}", cfg.run_id)))?;
            rows.push(SweepRow {
                param,
                value,
                seed,
                run_id: cfg.run_id,
                final_return: results.final_return,
                behavior_return: results.behavior_return.unwrap_or(f64::NAN),
            });
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| MoanError::Io(e.into_error()))?;
    write_atomic(&summary_path(out_root, base, param), &bytes)?;
    Ok(rows)
}

/// Reads a sweep summary back.
pub fn read_summary(path: &Path) -> Result<Vec<SweepRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let rows: std::result::Result<Vec<SweepRow>, csv::Error> = reader.deserialize().collect();
    Ok(rows?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_points_share_names_across_parameters() {
        let base = ExperimentConfig::default();
        let a = sweep_point(&base, SweepParam::Alpha, base.model.alpha, 3);
        let e = sweep_point(&base, SweepParam::Eta, base.penalty.eta, 3);
        assert_eq!(a.run_id, e.run_id);
        assert_eq!(a, e);
        assert_eq!(sweep_point(&base, SweepParam::Eta, 0.0, 1).run_id, "alpha0.1-eta0-seed1");
        assert_eq!("alpha".parse::<SweepParam>().unwrap(), SweepParam::Alpha);
        assert!("beta".parse::<SweepParam>().is_err());
    }
}
