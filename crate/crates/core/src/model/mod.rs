//! Adversarially trained dynamics ensemble.
//!
//! Each ensemble member is a diagonal Gaussian over the normalized
//! `(Δs, r)` given normalized `(s, a)`. One shared discriminator scores
//! normalized `(s, a, Δs, r)` tuples with the probability that they are real.
//! Generated tuples keep the data's `(s, a)` and replace `(Δs, r)` with a
//! reparameterized sample from a member.

mod train;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{Transition, TransitionDataset, STD_FLOOR};
use crate::error::{MoanError, Result};
use crate::nn::{
    clamp_logit, gaussian_head, gaussian_nll_batch, log_one_minus_sigmoid, log_sigmoid, sigmoid,
    GaussianBatch, GaussianOutput, NetSpec, Network,
};
use crate::rng::SeededRng;

pub use train::{train_adversarial, GeneratorLoss, ModelTrainConfig, ModelTrainReport};

/// Per-dimension affine normalization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit(rows: ArrayView2<f64>) -> Self {
        let mean = rows.mean_axis(Axis(0)).expect("non-empty rows");
        let std = rows
            .std_axis(Axis(0), 0.0)
            .mapv(|s| s.max(STD_FLOOR));
        Normalizer {
            mean: mean.to_vec(),
            std: std.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, rows: ArrayView2<f64>) -> Array2<f64> {
        let mut out = rows.to_owned();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn denormalize(&self, rows: ArrayView2<f64>) -> Array2<f64> {
        let mut out = rows.to_owned();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        out
    }

    pub fn concat(&self, other: &Normalizer) -> Normalizer {
        Normalizer {
            mean: self.mean.iter().chain(&other.mean).copied().collect(),
            std: self.std.iter().chain(&other.std).copied().collect(),
        }
    }
}

/// Dataset tensors in both raw and normalized coordinates.
#[derive(Debug, Clone)]
pub struct ModelData {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    /// Raw targets `(s' - s, r)`.
    pub targets: Array2<f64>,
    /// Normalized `(s, a)`.
    pub inputs_n: Array2<f64>,
    /// Normalized `(Δs, r)`.
    pub targets_n: Array2<f64>,
}

pub fn raw_arrays(records: &[Transition]) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let n = records.len();
    let d_s = records.first().map_or(0, |t| t.s.len());
    let d_a = records.first().map_or(0, |t| t.a.len());
    let mut states = Array2::zeros((n, d_s));
    let mut actions = Array2::zeros((n, d_a));
    let mut targets = Array2::zeros((n, d_s + 1));
    for (i, t) in records.iter().enumerate() {
        for k in 0..d_s {
            states[[i, k]] = f64::from(t.s[k]);
            targets[[i, k]] = f64::from(t.s_next[k]) - f64::from(t.s[k]);
        }
        for k in 0..d_a {
            actions[[i, k]] = f64::from(t.a[k]);
        }
        targets[[i, d_s]] = f64::from(t.r);
    }
    (states, actions, targets)
}

/// Normalizers for `(s, a)` and `(Δs, r)`. State, action and reward statistics
/// come from the dataset header; `Δs` statistics are fitted on the records.
pub fn fit_normalizers(dataset: &TransitionDataset) -> (Normalizer, Normalizer) {
    let h = &dataset.header;
    let input = Normalizer {
        mean: h.state_mean.iter().chain(&h.action_mean).copied().collect(),
        std: h.state_std.iter().chain(&h.action_std).copied().collect(),
    };
    let (_, _, targets) = raw_arrays(&dataset.records);
    let delta = Normalizer::fit(targets.slice(s![.., ..h.d_s]));
    let output = Normalizer {
        mean: delta.mean.iter().copied().chain([h.reward_mean]).collect(),
        std: delta.std.iter().copied().chain([h.reward_std]).collect(),
    };
    (input, output)
}

impl ModelData {
    pub fn new(records: &[Transition], input_norm: &Normalizer, output_norm: &Normalizer) -> Self {
        let (states, actions, targets) = raw_arrays(records);
        let sa = concatenate![Axis(1), states, actions];
        ModelData {
            inputs_n: input_norm.normalize(sa.view()),
            targets_n: output_norm.normalize(targets.view()),
            states,
            actions,
            targets,
        }
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> ModelData {
        ModelData {
            states: self.states.select(Axis(0), idx),
            actions: self.actions.select(Axis(0), idx),
            targets: self.targets.select(Axis(0), idx),
            inputs_n: self.inputs_n.select(Axis(0), idx),
            targets_n: self.targets_n.select(Axis(0), idx),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsEnsemble {
    pub members: Vec<Network>,
    pub input_norm: Normalizer,
    pub output_norm: Normalizer,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl DynamicsEnsemble {
    pub fn new(
        spec: &NetSpec,
        size: usize,
        input_norm: Normalizer,
        output_norm: Normalizer,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if size == 0 {
            return Err(MoanError::Config("ensemble size must be at least 1".into()));
        }
        let state_dim = output_norm.dim() - 1;
        let action_dim = input_norm.dim() - state_dim;
        if spec.input_width() != input_norm.dim() {
            return Err(MoanError::dim("ensemble input", input_norm.dim(), spec.input_width()));
        }
        if spec.output_width() != 2 * output_norm.dim() {
            return Err(MoanError::dim(
                "ensemble output",
                2 * output_norm.dim(),
                spec.output_width(),
            ));
        }
        let members = (0..size)
            .map(|_| Network::init(spec.clone(), rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(DynamicsEnsemble {
            members,
            input_norm,
            output_norm,
            state_dim,
            action_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn normalize_inputs(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Array2<f64> {
        let sa = concatenate![Axis(1), states, actions];
        self.input_norm.normalize(sa.view())
    }

    /// Normalized-space Gaussian of one member.
    pub fn member_forward(&self, member: usize, inputs_n: ArrayView2<f64>) -> Result<GaussianBatch> {
        let raw = self.members[member].forward(inputs_n)?;
        Ok(gaussian_head(raw.view()))
    }

    /// De-normalized Gaussian over `(Δs, r)` for one member.
    pub fn predict(&self, member: usize, s: &[f64], a: &[f64]) -> Result<GaussianOutput> {
        if member >= self.len() {
            return Err(MoanError::Domain(format!(
                "member index {member} out of range for ensemble of {}",
                self.len()
            )));
        }
        if s.len() != self.state_dim {
            return Err(MoanError::dim("predict state", self.state_dim, s.len()));
        }
        if a.len() != self.action_dim {
            return Err(MoanError::dim("predict action", self.action_dim, a.len()));
        }
        let x = Array2::from_shape_vec(
            (1, s.len() + a.len()),
            s.iter().chain(a).copied().collect(),
        )
        .expect("shape");
        let g = self.member_forward(member, self.input_norm.normalize(x.view()).view())?;
        let norm = &self.output_norm;
        Ok(GaussianOutput {
            mean: g
                .mean
                .row(0)
                .iter()
                .zip(&norm.mean)
                .zip(&norm.std)
                .map(|((m, mu), sd)| m * sd + mu)
                .collect(),
            log_variance: g
                .log_var
                .row(0)
                .iter()
                .zip(&norm.std)
                .map(|(lv, sd)| lv + 2.0 * sd.ln())
                .collect(),
        })
    }

    /// Draws `(s', r)` from a uniformly chosen member; returns the member index.
    pub fn sample_next(&self, s: &[f64], a: &[f64], rng: &mut SeededRng) -> Result<(Vec<f64>, f64, usize)> {
        let member = rng.random_range(0..self.len());
        let g = self.predict(member, s, a)?;
        let draw: Vec<f64> = g
            .mean
            .iter()
            .zip(&g.log_variance)
            .map(|(m, lv)| m + (0.5 * lv).exp() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let s_next = s.iter().zip(&draw).map(|(x, d)| x + d).collect();
        Ok((s_next, draw[self.state_dim], member))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub net: Network,
    pub input_norm: Normalizer,
    pub output_norm: Normalizer,
}

impl Discriminator {
    pub fn new(
        spec: NetSpec,
        input_norm: Normalizer,
        output_norm: Normalizer,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let width = input_norm.dim() + output_norm.dim();
        if spec.input_width() != width {
            return Err(MoanError::dim("discriminator input", width, spec.input_width()));
        }
        Ok(Discriminator {
            net: Network::init(spec, rng)?,
            input_norm,
            output_norm,
        })
    }

    /// Normalized feature rows `(s, a, Δs, r)` for raw tuples.
    pub fn features(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        next_states: ArrayView2<f64>,
        rewards: ndarray::ArrayView1<f64>,
    ) -> Array2<f64> {
        let sa = concatenate![Axis(1), states, actions];
        let delta = &next_states - &states;
        let y = concatenate![Axis(1), delta, rewards.insert_axis(Axis(1))];
        concatenate![
            Axis(1),
            self.input_norm.normalize(sa.view()),
            self.output_norm.normalize(y.view())
        ]
    }

    /// Clamped logits for normalized feature rows.
    pub fn logits(&self, features: ArrayView2<f64>) -> Result<Array1<f64>> {
        let raw = self.net.forward(features)?;
        Ok(raw.column(0).mapv(|z| clamp_logit(z).0))
    }

    pub fn probabilities(&self, features: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.logits(features)?.mapv(sigmoid))
    }

    /// Probability that the raw tuple `(s, a, s', r)` is real.
    pub fn probability(&self, s: &[f64], a: &[f64], s_next: &[f64], r: f64) -> Result<f64> {
        let row = |v: &[f64]| Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("shape");
        let feats = self.features(
            row(s).view(),
            row(a).view(),
            row(s_next).view(),
            Array1::from_elem(1, r).view(),
        );
        Ok(self.probabilities(feats.view())?[0])
    }
}

/// Value of the discriminator objective and its gradient (for ascent).
#[derive(Debug, Clone)]
pub struct DiscObjective {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// `mean_real log D + mean_fake log(1 - D)` over normalized feature batches.
pub fn disc_objective(
    disc: &Network,
    real: ArrayView2<f64>,
    fake: ArrayView2<f64>,
) -> Result<DiscObjective> {
    if real.nrows() == 0 || fake.nrows() == 0 {
        return Err(MoanError::Domain("discriminator batches must be non-empty".into()));
    }
    let n_real = real.nrows();
    let feats = concatenate![Axis(0), real, fake];
    let (raw, cache) = disc.forward_cached(feats.view())?;
    let mut d_raw = Array2::zeros(raw.raw_dim());
    let mut real_sum = 0.0;
    let mut fake_sum = 0.0;
    let inv_real = 1.0 / n_real as f64;
    let inv_fake = 1.0 / fake.nrows() as f64;
    for (i, z) in raw.column(0).iter().enumerate() {
        let (l, dl) = clamp_logit(*z);
        let p = sigmoid(l);
        if i < n_real {
            real_sum += log_sigmoid(l);
            d_raw[[i, 0]] = (1.0 - p) * dl * inv_real;
        } else {
            fake_sum += log_one_minus_sigmoid(l);
            d_raw[[i, 0]] = -p * dl * inv_fake;
        }
    }
    let (grad, _) = disc.backward(&cache, d_raw.view())?;
    Ok(DiscObjective {
        value: real_sum * inv_real + fake_sum * inv_fake,
        grad,
    })
}

/// Generator objective for one member and its parameter gradient (for descent).
#[derive(Debug, Clone)]
pub struct GenObjective {
    pub loss: f64,
    pub nll: f64,
    pub adversarial: f64,
    pub grad: Vec<f64>,
}

/// `mean NLL + alpha * mean log(1 - D(s, a, ŷ))` with `ŷ = mean + std * noise`.
///
/// The discriminator is read but never differentiated with respect to its own
/// parameters. With `alpha == 0` the discriminator is not evaluated at all.
pub fn gen_objective(
    member: &Network,
    disc: &Network,
    inputs_n: ArrayView2<f64>,
    targets_n: ArrayView2<f64>,
    alpha: f64,
    noise: ArrayView2<f64>,
    loss_kind: GeneratorLoss,
) -> Result<GenObjective> {
    let (raw, cache) = member.forward_cached(inputs_n)?;
    let head = gaussian_head(raw.view());
    let nll = gaussian_nll_batch(head.mean.view(), head.log_var.view(), targets_n);
    let mut d_mean = nll.d_mean;
    let mut d_log_var = nll.d_log_var;
    let mut adversarial = 0.0;
    if alpha != 0.0 {
        let std = head.log_var.mapv(|lv| (0.5 * lv).exp());
        let sample = &head.mean + &(&std * &noise);
        let feats = concatenate![Axis(1), inputs_n, sample];
        let (z, dcache) = disc.forward_cached(feats.view())?;
        let n = z.nrows() as f64;
        let mut d_z = Array2::zeros(z.raw_dim());
        for (i, zi) in z.column(0).iter().enumerate() {
            let (l, dl) = clamp_logit(*zi);
            let p = sigmoid(l);
            let (term, slope) = match loss_kind {
                GeneratorLoss::Saturating => (log_one_minus_sigmoid(l), -p),
                GeneratorLoss::NonSaturating => (-log_sigmoid(l), -(1.0 - p)),
            };
            adversarial += term;
            d_z[[i, 0]] = alpha * slope * dl / n;
        }
        adversarial /= n;
        let (_, d_feats) = disc.backward(&dcache, d_z.view())?;
        let x_dim = inputs_n.ncols();
        let d_sample = d_feats.slice(s![.., x_dim..]);
        d_mean += &d_sample;
        let d_lv_extra = &d_sample * &(&std * &noise) * 0.5;
        d_log_var += &d_lv_extra;
    }
    let d_raw = head.chain(d_mean.view(), d_log_var.view());
    let (grad, _) = member.backward(&cache, d_raw.view())?;
    Ok(GenObjective {
        loss: nll.loss + alpha * adversarial,
        nll: nll.loss,
        adversarial,
        grad,
    })
}

/// Per-member mean squared error of the predicted mean `(Δs, r)` against the
/// truth, averaged over records and output dimensions, in raw units.
pub fn validation_mse(ensemble: &DynamicsEnsemble, holdout: &[Transition]) -> Result<Vec<f64>> {
    if holdout.is_empty() {
        return Err(MoanError::Domain("holdout set is empty".into()));
    }
    let data = ModelData::new(holdout, &ensemble.input_norm, &ensemble.output_norm);
    validation_mse_arrays(ensemble, &data)
}

pub(crate) fn validation_mse_arrays(ensemble: &DynamicsEnsemble, data: &ModelData) -> Result<Vec<f64>> {
    (0..ensemble.len())
        .map(|k| {
            let g = ensemble.member_forward(k, data.inputs_n.view())?;
            let pred = ensemble.output_norm.denormalize(g.mean.view());
            let err = &pred - &data.targets;
            Ok(err.mapv(|e| e * e).mean().expect("non-empty"))
        })
        .collect()
}
