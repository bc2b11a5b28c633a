use std::time::Instant;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    disc_objective, fit_normalizers, gen_objective, validation_mse_arrays, Discriminator,
    DynamicsEnsemble, ModelData,
};
use crate::env::TransitionDataset;
use crate::error::{MoanError, Result};
use crate::nn::{Activation, AdamConfig, AdamState, NetSpec, Network, OutputHead};
use crate::rng::{substream, SeededRng};

/// Form of the adversarial term in the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorLoss {
    /// `+log(1 - D)`, minimized.
    #[default]
    Saturating,
    /// `-log D`, minimized.
    NonSaturating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelTrainConfig {
    pub ensemble_size: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub disc_hidden: Vec<usize>,
    /// Weight of the adversarial term.
    pub alpha: f64,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub holdout_fraction: f64,
    pub patience: usize,
    pub disc_steps_per_gen_step: usize,
    pub generator_loss: GeneratorLoss,
    /// Apply the generator update as gradient *ascent* on its objective.
    /// Exists to reproduce the sign convention printed in some pseudo-code;
    /// it makes the likelihood term diverge and is never the right choice.
    pub literal_signs: bool,
    pub seed: u64,
}

impl Default for ModelTrainConfig {
    fn default() -> Self {
        ModelTrainConfig {
            ensemble_size: 7,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            disc_hidden: vec![64, 64],
            alpha: 0.1,
            lr_gen: 1e-3,
            lr_disc: 3e-4,
            batch_size: 256,
            max_epochs: 60,
            holdout_fraction: 0.1,
            patience: 5,
            disc_steps_per_gen_step: 1,
            generator_loss: GeneratorLoss::Saturating,
            literal_signs: false,
            seed: 0,
        }
    }
}

impl ModelTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MoanError::Config(m.to_string()));
        if self.ensemble_size == 0 {
            return bad("model.ensemble_size must be at least 1");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("model.hidden needs at least one positive width");
        }
        if self.disc_hidden.is_empty() || self.disc_hidden.contains(&0) {
            return bad("model.disc_hidden needs at least one positive width");
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad("model.alpha must be non-negative");
        }
        if !(self.lr_gen > 0.0) || !(self.lr_disc > 0.0) {
            return bad("model.lr_gen and model.lr_disc must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.disc_steps_per_gen_step == 0 {
            return bad("model.batch_size, max_epochs and disc_steps_per_gen_step must be positive");
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction <= 0.5) {
            return bad("model.holdout_fraction must lie in (0, 0.5]");
        }
        Ok(())
    }

    pub fn member_spec(&self, state_dim: usize, action_dim: usize) -> NetSpec {
        NetSpec::mlp(
            state_dim + action_dim,
            &self.hidden,
            2 * (state_dim + 1),
            self.activation,
            OutputHead::GaussianDiag,
        )
    }

    pub fn disc_spec(&self, state_dim: usize, action_dim: usize) -> NetSpec {
        NetSpec::mlp(
            2 * state_dim + action_dim + 1,
            &self.disc_hidden,
            1,
            self.activation,
            OutputHead::SigmoidScalar,
        )
    }
}

/// Per-epoch training curves.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelTrainReport {
    pub gen_nll: Vec<f64>,
    pub gen_adv_loss: Vec<f64>,
    pub disc_loss: Vec<f64>,
    /// `holdout_mse[epoch][member]`, raw units.
    pub holdout_mse: Vec<Vec<f64>>,
    pub disc_accuracy: Vec<f64>,
    pub stop_epoch: usize,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
    pub wall_time: f64,
}

struct MemberState {
    adam: AdamState,
    rng: SeededRng,
    order: Vec<usize>,
}

/// Normalized `(s, a, ŷ)` rows where row `i` is generated by member `i mod N`.
fn generated_features(
    ensemble: &DynamicsEnsemble,
    inputs_n: &Array2<f64>,
    rng: &mut SeededRng,
) -> Result<Array2<f64>> {
    let n = inputs_n.nrows();
    let d_y = ensemble.output_norm.dim();
    let mut y = Array2::zeros((n, d_y));
    for k in 0..ensemble.len() {
        let rows: Vec<usize> = (k..n).step_by(ensemble.len()).collect();
        if rows.is_empty() {
            continue;
        }
        let g = ensemble.member_forward(k, inputs_n.select(Axis(0), &rows).view())?;
        for (r, &i) in rows.iter().enumerate() {
            for j in 0..d_y {
                let eps: f64 = rng.sample(StandardNormal);
                y[[i, j]] = g.mean[[r, j]] + (0.5 * g.log_var[[r, j]]).exp() * eps;
            }
        }
    }
    Ok(concatenate![Axis(1), *inputs_n, y])
}

/// Balanced accuracy of `disc` on held-out real rows versus generated rows.
fn disc_accuracy(
    ensemble: &DynamicsEnsemble,
    disc: &Network,
    holdout: &ModelData,
    rng: &mut SeededRng,
) -> Result<f64> {
    let real = concatenate![Axis(1), holdout.inputs_n, holdout.targets_n];
    let fake = generated_features(ensemble, &holdout.inputs_n, rng)?;
    let p = |x: &Array2<f64>| -> Result<Vec<f64>> {
        let raw = disc.forward(x.view())?;
        Ok(raw
            .column(0)
            .iter()
            .map(|z| crate::nn::sigmoid(crate::nn::clamp_logit(*z).0))
            .collect())
    };
    let real_ok = p(&real)?.iter().filter(|&&d| d > 0.5).count() as f64 / real.nrows() as f64;
    let fake_ok = p(&fake)?.iter().filter(|&&d| d < 0.5).count() as f64 / fake.nrows() as f64;
    Ok(0.5 * (real_ok + fake_ok))
}

fn check_finite(value: f64, phase: &str, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(MoanError::Diverged {
            phase: phase.to_string(),
            step,
            detail: format!("loss became {value}"),
        })
    }
}

/// Trains the ensemble and the shared discriminator with alternating updates,
/// early-stopping on mean holdout MSE and restoring the best epoch.
pub fn train_adversarial(
    dataset: &TransitionDataset,
    config: &ModelTrainConfig,
) -> Result<(DynamicsEnsemble, Discriminator, ModelTrainReport)> {
    config.validate()?;
    let started = Instant::now();
    let count = dataset.len();
    if count < 10 * config.batch_size {
        return Err(MoanError::Domain(format!(
            "dataset has {count} transitions but training needs at least 10 x batch_size = {}",
            10 * config.batch_size
        )));
    }
    let (d_s, d_a) = (dataset.header.d_s, dataset.header.d_a);
    let (input_norm, output_norm) = fit_normalizers(dataset);

    let mut split: Vec<usize> = (0..count).collect();
    split.shuffle(&mut substream(config.seed, "model-holdout", 0));
    let n_hold = ((count as f64 * config.holdout_fraction).round() as usize).clamp(1, count - 1);
    let all = ModelData::new(&dataset.records, &input_norm, &output_norm);
    let holdout = all.select(&split[..n_hold]);
    let train = all.select(&split[n_hold..]);
    let n_train = train.len();

    let mut ensemble = DynamicsEnsemble::new(
        &config.member_spec(d_s, d_a),
        config.ensemble_size,
        input_norm.clone(),
        output_norm.clone(),
        &mut substream(config.seed, "model-init", 0),
    )?;
    let mut disc = Discriminator::new(
        config.disc_spec(d_s, d_a),
        input_norm,
        output_norm,
        &mut substream(config.seed, "disc-init", 0),
    )?;

    let gen_adam = AdamConfig::with_lr(config.lr_gen);
    let mut members: Vec<MemberState> = (0..config.ensemble_size)
        .map(|k| MemberState {
            adam: AdamState::new(ensemble.members[k].params().len(), gen_adam),
            rng: substream(config.seed, "model-member", k as u64),
            order: (0..n_train).collect(),
        })
        .collect();
    let mut disc_adam = AdamState::new(disc.net.params().len(), AdamConfig::with_lr(config.lr_disc));
    let mut disc_rng = substream(config.seed, "model-disc", 0);
    let mut eval_rng = substream(config.seed, "model-eval", 0);

    let steps_per_epoch = n_train.div_ceil(config.batch_size);
    let batch = config.batch_size;
    let mut report = ModelTrainReport::default();
    let mut best = (f64::INFINITY, ensemble.clone(), disc.clone(), 0usize);
    let mut since_best = 0;
    let mut global_step = 0usize;

    for epoch in 0..config.max_epochs {
        for m in &mut members {
            m.order.shuffle(&mut m.rng);
        }
        let (mut nll_acc, mut adv_acc, mut disc_acc) = (0.0, 0.0, 0.0);
        for step in 0..steps_per_epoch {
            global_step += 1;
            let lo = step * batch;
            let hi = (lo + batch).min(n_train);
            let disc_net = &disc.net;
            let results: Vec<Result<(f64, f64)>> = ensemble
                .members
                .par_iter_mut()
                .zip(members.par_iter_mut())
                .map(|(net, st)| {
                    let idx = &st.order[lo..hi];
                    let x = train.inputs_n.select(Axis(0), idx);
                    let y = train.targets_n.select(Axis(0), idx);
                    let noise = Array2::from_shape_simple_fn(y.raw_dim(), || {
                        st.rng.sample::<f64, _>(StandardNormal)
                    });
                    let obj = gen_objective(
                        net,
                        disc_net,
                        x.view(),
                        y.view(),
                        config.alpha,
                        noise.view(),
                        config.generator_loss,
                    )?;
                    check_finite(obj.loss, "generator", global_step)?;
                    let grad = if config.literal_signs {
                        obj.grad.iter().map(|g| -g).collect()
                    } else {
                        obj.grad
                    };
                    st.adam.step(net.params_mut(), &grad).map_err(|_| MoanError::Diverged {
                        phase: "generator".into(),
                        step: global_step,
                        detail: "non-finite gradient".into(),
                    })?;
                    Ok((obj.nll, obj.adversarial))
                })
                .collect();
            for r in results {
                let (nll, adv) = r?;
                nll_acc += nll;
                adv_acc += adv;
            }

            // the discriminator is always trained: the reward penalty needs it
            // even when alpha = 0 removes it from the generator objective
            for _ in 0..config.disc_steps_per_gen_step {
                let idx: Vec<usize> = (0..hi - lo).map(|_| disc_rng.random_range(0..n_train)).collect();
                let x = train.inputs_n.select(Axis(0), &idx);
                let real = concatenate![Axis(1), x, train.targets_n.select(Axis(0), &idx)];
                let fake = generated_features(&ensemble, &x, &mut disc_rng)?;
                let obj = disc_objective(&disc.net, real.view(), fake.view())?;
                check_finite(obj.value, "discriminator", global_step)?;
                // ascent on the discriminator objective
                let neg: Vec<f64> = obj.grad.iter().map(|g| -g).collect();
                disc_adam.step(disc.net.params_mut(), &neg).map_err(|_| MoanError::Diverged {
                    phase: "discriminator".into(),
                    step: global_step,
                    detail: "non-finite gradient".into(),
                })?;
                disc_acc += obj.value;
            }
        }

        let n_updates = (steps_per_epoch * config.ensemble_size) as f64;
        report.gen_nll.push(nll_acc / n_updates);
        report.gen_adv_loss.push(adv_acc / n_updates);
        report
            .disc_loss
            .push(disc_acc / (steps_per_epoch * config.disc_steps_per_gen_step) as f64);
        let mse = validation_mse_arrays(&ensemble, &holdout)?;
        let mean_mse = mse.iter().sum::<f64>() / mse.len() as f64;
        check_finite(mean_mse, "holdout", global_step)?;
        report.holdout_mse.push(mse);
        report
            .disc_accuracy
            .push(disc_accuracy(&ensemble, &disc.net, &holdout, &mut eval_rng)?);
        report.stop_epoch = epoch + 1;

        if mean_mse < best.0 {
            best = (mean_mse, ensemble.clone(), disc.clone(), epoch + 1);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let (_, best_ensemble, best_disc, best_epoch) = best;
    report.best_epoch = best_epoch;
    report.wall_time = started.elapsed().as_secs_f64();
    Ok((best_ensemble, best_disc, report))
}
