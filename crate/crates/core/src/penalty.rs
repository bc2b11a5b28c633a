//! Reward reshaping for model-generated transitions:
//! `r̃ = r − η (σ + √(2u))`, where `σ` aggregates the ensemble's predictive
//! standard deviation and `u` is the discriminator's discrepancy score.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{MoanError, Result};
use crate::model::{Discriminator, DynamicsEnsemble};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    /// `u = D(s, a, s', r)`: the discriminator output inserted as-is.
    Literal,
    /// `u = 1 − D(s, a, s', r)`: large when the tuple looks generated.
    #[default]
    Discrepancy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaAggregation {
    /// Largest `‖std‖₂` over members.
    #[default]
    MaxMemberStdNorm,
    /// `‖std‖₂` of the member that generated the sample.
    ChosenMemberStdNorm,
    /// Mean `‖std‖₂` over members.
    MeanMemberStdNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltyConfig {
    pub eta: f64,
    pub mode: PenaltyMode,
    pub sigma_agg: SigmaAggregation,
    /// Number of model samples averaged inside the discriminator term.
    /// With 1, the discriminator scores the sample actually used.
    pub disc_samples: usize,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            eta: 0.3,
            mode: PenaltyMode::Discrepancy,
            sigma_agg: SigmaAggregation::MaxMemberStdNorm,
            disc_samples: 1,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(MoanError::Config("penalty.eta must be non-negative".into()));
        }
        if self.disc_samples == 0 {
            return Err(MoanError::Config("penalty.disc_samples must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyBreakdown {
    pub r_raw: f64,
    pub sigma_term: f64,
    pub u: f64,
    pub disc_term: f64,
    pub r_shaped: f64,
}

impl PenaltyBreakdown {
    /// `σ + √(2u)`, independent of `η`.
    pub fn magnitude(&self) -> f64 {
        self.sigma_term + self.disc_term
    }
}

/// Per-member `‖std‖₂` (normalized units) for every row, shape `(rows, N)`.
pub fn member_std_norms(ensemble: &DynamicsEnsemble, inputs_n: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((inputs_n.nrows(), ensemble.len()));
    for k in 0..ensemble.len() {
        let g = ensemble.member_forward(k, inputs_n)?;
        for (i, row) in g.log_var.rows().into_iter().enumerate() {
            out[[i, k]] = row.iter().map(|lv| lv.exp()).sum::<f64>().sqrt();
        }
    }
    Ok(out)
}

/// Reduces a row of member std norms according to `agg`.
pub fn aggregate_row(norms: &[f64], member: usize, agg: SigmaAggregation) -> f64 {
    match agg {
        SigmaAggregation::MaxMemberStdNorm => norms.iter().copied().fold(0.0, f64::max),
        SigmaAggregation::ChosenMemberStdNorm => norms[member],
        SigmaAggregation::MeanMemberStdNorm => norms.iter().sum::<f64>() / norms.len() as f64,
    }
}

/// Uncertainty term `σ(s, a)` for a single pair.
pub fn sigma_aggregate(
    ensemble: &DynamicsEnsemble,
    s: &[f64],
    a: &[f64],
    member: usize,
    agg: SigmaAggregation,
) -> Result<f64> {
    if member >= ensemble.len() {
        return Err(MoanError::Domain(format!(
            "member index {member} out of range for ensemble of {}",
            ensemble.len()
        )));
    }
    if s.len() != ensemble.state_dim {
        return Err(MoanError::dim("penalty state", ensemble.state_dim, s.len()));
    }
    if a.len() != ensemble.action_dim {
        return Err(MoanError::dim("penalty action", ensemble.action_dim, a.len()));
    }
    let row = |v: &[f64]| Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("shape");
    let x = ensemble.normalize_inputs(row(s).view(), row(a).view());
    let norms = member_std_norms(ensemble, x.view())?;
    Ok(aggregate_row(norms.row(0).as_slice().expect("contiguous"), member, agg))
}

/// Maps a discriminator probability to the score `u` for `mode`.
pub fn discrepancy_from_probability(d: f64, mode: PenaltyMode) -> f64 {
    match mode {
        PenaltyMode::Literal => d,
        PenaltyMode::Discrepancy => 1.0 - d,
    }
}

/// Discrepancy score `u ∈ (0, 1)` of a raw tuple.
pub fn discrepancy(
    disc: &Discriminator,
    s: &[f64],
    a: &[f64],
    s_next: &[f64],
    r: f64,
    mode: PenaltyMode,
) -> Result<f64> {
    if s.iter().chain(a).chain(s_next).any(|v| !v.is_finite()) || !r.is_finite() {
        return Err(MoanError::NonFinite("discrepancy tuple".into()));
    }
    Ok(discrepancy_from_probability(disc.probability(s, a, s_next, r)?, mode))
}

/// `r − η (σ + √(2u))` with its breakdown.
pub fn reshape_reward(r: f64, sigma_term: f64, u: f64, eta: f64) -> Result<PenaltyBreakdown> {
    if !(u > 0.0 && u < 1.0) {
        return Err(MoanError::Domain(format!("discrepancy score {u} outside (0, 1)")));
    }
    if !(sigma_term >= 0.0) || !(eta >= 0.0) {
        return Err(MoanError::Domain(format!(
            "sigma_term {sigma_term} and eta {eta} must be non-negative"
        )));
    }
    let disc_term = (2.0 * u).sqrt();
    Ok(PenaltyBreakdown {
        r_raw: r,
        sigma_term,
        u,
        disc_term,
        r_shaped: r - eta * (sigma_term + disc_term),
    })
}

/// Batched penalty for model samples `(s, a, s', r)` drawn from `members`.
/// `extra_next` holds `disc_samples − 1` additional `(s', r)` draws per row
/// whose discriminator scores are averaged with the actual sample.
pub struct PenaltyBatch<'a> {
    pub states: ArrayView2<'a, f64>,
    pub actions: ArrayView2<'a, f64>,
    pub next_states: ArrayView2<'a, f64>,
    pub rewards: &'a [f64],
    pub members: &'a [usize],
    pub extra: &'a [(Array2<f64>, Array1<f64>)],
}

pub fn penalize_batch(
    ensemble: &DynamicsEnsemble,
    disc: &Discriminator,
    batch: &PenaltyBatch<'_>,
    cfg: &PenaltyConfig,
) -> Result<Vec<PenaltyBreakdown>> {
    let x = ensemble.normalize_inputs(batch.states, batch.actions);
    let norms = member_std_norms(ensemble, x.view())?;
    let rewards = Array1::from(batch.rewards.to_vec());
    let feats = disc.features(batch.states, batch.actions, batch.next_states, rewards.view());
    let mut probs = disc.probabilities(feats.view())?;
    for (s_next, r) in batch.extra {
        let f = disc.features(batch.states, batch.actions, s_next.view(), r.view());
        probs += &disc.probabilities(f.view())?;
    }
    probs /= (1 + batch.extra.len()) as f64;
    (0..x.nrows())
        .map(|i| {
            let sigma = aggregate_row(
                norms.row(i).as_slice().expect("contiguous"),
                batch.members[i],
                cfg.sigma_agg,
            );
            let u = discrepancy_from_probability(probs[i], cfg.mode);
            reshape_reward(batch.rewards[i], sigma, u, cfg.eta)
        })
        .collect()
}
