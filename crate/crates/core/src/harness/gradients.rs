//! Finite-difference checks of every hand-derived gradient on small tanh
//! networks: discriminator ascent, generator descent (with and without the
//! adversarial term), both critic losses, the actor and the temperature.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::model::{disc_objective, gen_objective, GeneratorLoss, ModelTrainConfig};
use crate::nn::{grad_check, Activation, Network};
use crate::rng::{substream, SeededRng};
use crate::sac::{actor_loss, critic_loss, temperature_loss, SacAgent, SacHyper, SquashedGaussianPolicy};

/// Finite-difference step used by the suite.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientCheck {
    pub name: String,
    pub params: usize,
    pub max_relative_error: f64,
}

impl GradientCheck {
    pub fn passed(&self) -> bool {
        self.max_relative_error < FD_TOLERANCE
    }
}

fn uniform(rows: usize, cols: usize, rng: &mut SeededRng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

fn normal(rows: usize, cols: usize, rng: &mut SeededRng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

fn check(name: &str, net: &Network, analytic: &[f64], loss: impl Fn(&Network) -> f64) -> GradientCheck {
    let spec = net.spec().clone();
    let report = grad_check(net.params(), analytic, FD_STEP, |p| {
        loss(&Network::from_params(spec.clone(), p.to_vec()).expect("same spec"))
    });
    GradientCheck {
        name: name.into(),
        params: net.params().len(),
        max_relative_error: report.max_relative_error,
    }
}

/// Runs every check for one seed.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradientCheck>> {
    let (d_s, d_a, n) = (3, 2, 8);
    let mut rng = substream(seed, "gradcheck", 0);
    let mcfg = ModelTrainConfig {
        hidden: vec![8, 8],
        disc_hidden: vec![8],
        activation: Activation::Tanh,
        ..ModelTrainConfig::default()
    };
    let member = Network::init(mcfg.member_spec(d_s, d_a), &mut rng)?;
    let disc = Network::init(mcfg.disc_spec(d_s, d_a), &mut rng)?;
    let d_x = d_s + d_a;
    let d_y = d_s + 1;
    let inputs = uniform(n, d_x, &mut rng);
    let targets = uniform(n, d_y, &mut rng);
    let noise_y = normal(n, d_y, &mut rng);
    let real = uniform(n, d_x + d_y, &mut rng);
    let fake = uniform(n, d_x + d_y, &mut rng);

    let mut out = Vec::new();
    let g = disc_objective(&disc, real.view(), fake.view())?.grad;
    out.push(check("discriminator objective", &disc, &g, |d| {
        disc_objective(d, real.view(), fake.view()).expect("shapes").value
    }));
    for (name, alpha, kind) in [
        ("generator objective, alpha = 0", 0.0, GeneratorLoss::Saturating),
        ("generator objective, alpha = 1", 1.0, GeneratorLoss::Saturating),
        ("generator objective, alpha = 1, non-saturating", 1.0, GeneratorLoss::NonSaturating),
    ] {
        let gen = |m: &Network| gen_objective(m, &disc, inputs.view(), targets.view(), alpha, noise_y.view(), kind);
        let g = gen(&member)?.grad;
        out.push(check(name, &member, &g, |m| gen(m).expect("shapes").loss));
    }

    let agent = SacAgent::new(d_s, d_a, &[8, 8], Activation::Tanh, SacHyper::default(), &mut rng)?;
    let states = uniform(n, d_s, &mut rng);
    let actions = uniform(n, d_a, &mut rng);
    let y = uniform(n, 1, &mut rng).column(0).to_owned();
    for (name, q) in [("critic 1 loss", &agent.q1), ("critic 2 loss", &agent.q2)] {
        let (_, g) = critic_loss(q, states.view(), actions.view(), y.view())?;
        out.push(check(name, q, &g, |q| {
            critic_loss(q, states.view(), actions.view(), y.view()).expect("shapes").0
        }));
    }
    let eps = normal(n, d_a, &mut rng);
    let alpha = 0.3;
    let (_, g, log_probs) = actor_loss(&agent.policy, &agent.q1, &agent.q2, alpha, states.view(), eps.view())?;
    out.push(check("actor loss", &agent.policy.net, &g, |net| {
        let pi = SquashedGaussianPolicy { net: net.clone() };
        actor_loss(&pi, &agent.q1, &agent.q2, alpha, states.view(), eps.view())
            .expect("shapes")
            .0
    }));
    let log_alpha = -0.7;
    let target = -(d_a as f64);
    let lp: Array1<f64> = log_probs;
    let (_, g) = temperature_loss(log_alpha, lp.view(), target);
    let report = grad_check(&[log_alpha], &[g], FD_STEP, |p| temperature_loss(p[0], lp.view(), target).0);
    out.push(GradientCheck {
        name: "temperature loss".into(),
        params: 1,
        max_relative_error: report.max_relative_error,
    });
    Ok(out)
}
