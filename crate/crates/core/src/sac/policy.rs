use std::f64::consts::{LN_2, PI};

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::env::Actor;
use crate::error::Result;
use crate::nn::{gaussian_head, Activation, ForwardCache, GaussianBatch, NetSpec, Network, OutputHead};
use crate::rng::SeededRng;

/// `log(1 - tanh(u)^2)` without cancellation.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (LN_2 - u - crate::nn::softplus(-2.0 * u))
}

/// Gaussian policy whose samples are squashed into `[-1, 1]` by `tanh`.
#[derive(Debug, Clone, PartialEq)]
pub struct SquashedGaussianPolicy {
    pub net: Network,
}

/// Batch of reparameterized samples together with everything needed to
/// backpropagate a loss on `(action, log_prob)` into the policy parameters.
#[derive(Debug, Clone)]
pub struct PolicySample {
    pub action: Array2<f64>,
    pub log_prob: Array1<f64>,
    noise: Array2<f64>,
    head: GaussianBatch,
    cache: ForwardCache,
}

impl SquashedGaussianPolicy {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let spec = NetSpec::mlp(state_dim, hidden, 2 * action_dim, activation, OutputHead::GaussianDiag);
        Ok(SquashedGaussianPolicy {
            net: Network::init(spec, rng)?,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.net.spec().output_width() / 2
    }

    pub fn state_dim(&self) -> usize {
        self.net.spec().input_width()
    }

    /// Squashed sample `tanh(mean + std * noise)` with its change-of-variables
    /// log-density, evaluated for fixed `noise`.
    pub fn sample_with_noise(
        &self,
        states: ArrayView2<f64>,
        noise: ArrayView2<f64>,
    ) -> Result<PolicySample> {
        let (raw, cache) = self.net.forward_cached(states)?;
        let head = gaussian_head(raw.view());
        let (rows, d_a) = head.mean.dim();
        let mut action = Array2::zeros((rows, d_a));
        let mut log_prob = Array1::zeros(rows);
        let half_log_2pi = 0.5 * (2.0 * PI).ln();
        for i in 0..rows {
            let mut lp = 0.0;
            for j in 0..d_a {
                let lv = head.log_var[[i, j]];
                let eps = noise[[i, j]];
                let u = head.mean[[i, j]] + (0.5 * lv).exp() * eps;
                action[[i, j]] = u.tanh();
                lp += -0.5 * eps * eps - 0.5 * lv - half_log_2pi - log_one_minus_tanh_sq(u);
            }
            log_prob[i] = lp;
        }
        Ok(PolicySample {
            action,
            log_prob,
            noise: noise.to_owned(),
            head,
            cache,
        })
    }

    /// Parameter gradient of a loss given its gradients with respect to the
    /// sampled actions and log-probabilities.
    pub fn backward(
        &self,
        sample: &PolicySample,
        d_action: ArrayView2<f64>,
        d_log_prob: ndarray::ArrayView1<f64>,
    ) -> Result<Vec<f64>> {
        let (rows, d_a) = sample.action.dim();
        let mut d_mean = Array2::zeros((rows, d_a));
        let mut d_log_var = Array2::zeros((rows, d_a));
        for i in 0..rows {
            for j in 0..d_a {
                let a = sample.action[[i, j]];
                let eps = sample.noise[[i, j]];
                let std = (0.5 * sample.head.log_var[[i, j]]).exp();
                // d/du of the loss through both the action and the tanh correction
                let d_u = d_action[[i, j]] * (1.0 - a * a) + d_log_prob[i] * 2.0 * a;
                d_mean[[i, j]] = d_u;
                d_log_var[[i, j]] = d_u * 0.5 * std * eps - 0.5 * d_log_prob[i];
            }
        }
        let d_raw = sample.head.chain(d_mean.view(), d_log_var.view());
        let (grad, _) = self.net.backward(&sample.cache, d_raw.view())?;
        Ok(grad)
    }

    /// Single-state action. `deterministic` returns the squashed mean.
    pub fn sample_action(
        &self,
        s: &[f64],
        rng: &mut SeededRng,
        deterministic: bool,
    ) -> Result<(Vec<f64>, f64)> {
        let d_a = self.action_dim();
        let states = ArrayView2::from_shape((1, s.len()), s)
            .map_err(|_| crate::MoanError::dim("policy input", self.state_dim(), s.len()))?;
        let noise = if deterministic {
            Array2::zeros((1, d_a))
        } else {
            Array2::from_shape_fn((1, d_a), |_| rng.sample(StandardNormal))
        };
        let sample = self.sample_with_noise(states, noise.view())?;
        Ok((sample.action.row(0).to_vec(), sample.log_prob[0]))
    }
}

/// Acts with the squashed mean.
pub struct Deterministic<'a>(pub &'a SquashedGaussianPolicy);

/// Acts by sampling the squashed Gaussian.
pub struct Stochastic<'a>(pub &'a SquashedGaussianPolicy);

impl Actor for Deterministic<'_> {
    fn act(&self, s: &[f64], rng: &mut SeededRng) -> Vec<f64> {
        self.0
            .sample_action(s, rng, true)
            .expect("policy input width matches env")
            .0
    }
}

impl Actor for Stochastic<'_> {
    fn act(&self, s: &[f64], rng: &mut SeededRng) -> Vec<f64> {
        self.0
            .sample_action(s, rng, false)
            .expect("policy input width matches env")
            .0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn zero_policy(d_s: usize, d_a: usize) -> SquashedGaussianPolicy {
        let spec = NetSpec::mlp(d_s, &[4], 2 * d_a, Activation::Tanh, OutputHead::GaussianDiag);
        SquashedGaussianPolicy {
            net: Network::zeros(spec).unwrap(),
        }
    }

    #[test]
    fn zero_policy_is_centered_and_symmetric() {
        let pi = zero_policy(3, 2);
        let mut rng = seeded(0);
        let (a, _) = pi.sample_action(&[0.1, 0.2, 0.3], &mut rng, true).unwrap();
        assert_eq!(a, vec![0.0, 0.0]);
        let noise = Array2::from_shape_vec((2, 2), vec![0.7, -0.3, -0.7, 0.3]).unwrap();
        let states = Array2::zeros((2, 3));
        let s = pi.sample_with_noise(states.view(), noise.view()).unwrap();
        assert!((s.action[[0, 0]] + s.action[[1, 0]]).abs() < 1e-15);
        assert!((s.log_prob[0] - s.log_prob[1]).abs() < 1e-12);
    }

    #[test]
    fn deterministic_actions_repeat() {
        let mut rng = seeded(4);
        let pi = SquashedGaussianPolicy::new(3, 1, &[8], Activation::Relu, &mut rng).unwrap();
        let s = [0.3, -0.1, 2.0];
        let a1 = pi.sample_action(&s, &mut seeded(1), true).unwrap();
        let a2 = pi.sample_action(&s, &mut seeded(2), true).unwrap();
        assert_eq!(a1, a2);
    }

    /// Oracle: probability mass of a small action interval computed by Simpson
    /// quadrature of the pre-squash Gaussian between the atanh-mapped bounds.
    #[test]
    fn log_prob_matches_quadrature_of_squashed_density() {
        let mut rng = seeded(9);
        let pi = SquashedGaussianPolicy::new(2, 1, &[6], Activation::Tanh, &mut rng).unwrap();
        let s = [0.4, -0.9];
        let raw = pi.net.forward(ArrayView2::from_shape((1, 2), &s).unwrap()).unwrap();
        let head = gaussian_head(raw.view());
        let (mu, sd) = (head.mean[[0, 0]], (0.5 * head.log_var[[0, 0]]).exp());
        let gauss = |u: f64| (-0.5 * ((u - mu) / sd).powi(2)).exp() / (sd * (2.0 * PI).sqrt());
        let simpson = |lo: f64, hi: f64| {
            let n = 200;
            let h = (hi - lo) / n as f64;
            let mut acc = gauss(lo) + gauss(hi);
            for k in 1..n {
                acc += gauss(lo + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
            }
            acc * h / 3.0
        };
        let half = 1e-4;
        let mut total = 0.0;
        let grid = 400;
        for k in 0..grid {
            let lo = -1.0 + 2.0 * k as f64 / grid as f64;
            let hi = lo + 2.0 / grid as f64;
            total += simpson(lo.max(-1.0 + 1e-12).atanh(), hi.min(1.0 - 1e-12).atanh());
        }
        assert!((total - 1.0).abs() < 1e-3, "mass {total}");
        for a in [-0.8, -0.2, 0.0, 0.35, 0.9] {
            let u = f64::atanh(a);
            let eps = (u - mu) / sd;
            let states = Array2::from_shape_vec((1, 2), s.to_vec()).unwrap();
            let sample = pi
                .sample_with_noise(states.view(), Array2::from_elem((1, 1), eps).view())
                .unwrap();
            let density = simpson((a - half).atanh(), (a + half).atanh()) / (2.0 * half);
            assert!(
                (sample.log_prob[0] - density.ln()).abs() < 1e-3,
                "a={a}: {} vs {}",
                sample.log_prob[0],
                density.ln()
            );
        }
    }
}
