//! Torque-limited pendulum swing-up. The pendulum is a uniform rod pivoting at
//! one end (moment of inertia `m l²/3`). The angle is measured from upright
//! and observed as `(cos θ, sin θ, θ̇)`; integration is semi-implicit Euler.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::StepOutcome;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Pendulum1d {
    pub mass: f64,
    pub length: f64,
    pub gravity: f64,
    pub max_torque: f64,
    pub max_speed: f64,
    pub dt: f64,
    /// Reset angle is `π + U(-angle_jitter, angle_jitter)`.
    pub angle_jitter: f64,
    pub speed_jitter: f64,
}

impl Default for Pendulum1d {
    fn default() -> Self {
        Pendulum1d {
            mass: 1.0,
            length: 1.0,
            gravity: 10.0,
            max_torque: 2.0,
            max_speed: 8.0,
            dt: 0.05,
            angle_jitter: 0.2,
            speed_jitter: 0.1,
        }
    }
}

pub fn angle_of(s: &[f64]) -> f64 {
    s[1].atan2(s[0])
}

impl Pendulum1d {
    pub fn observe(theta: f64, theta_dot: f64) -> Vec<f64> {
        vec![theta.cos(), theta.sin(), theta_dot]
    }

    pub fn inertia(&self) -> f64 {
        self.mass * self.length * self.length / 3.0
    }

    /// Mechanical energy with the pivot as height reference.
    pub fn energy(&self, theta: f64, theta_dot: f64) -> f64 {
        0.5 * self.inertia() * theta_dot * theta_dot
            + 0.5 * self.mass * self.gravity * self.length * theta.cos()
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let theta = PI + rng.random_range(-self.angle_jitter..=self.angle_jitter);
        let theta_dot = rng.random_range(-self.speed_jitter..=self.speed_jitter);
        Self::observe(theta, theta_dot)
    }

    pub fn step<R: Rng + ?Sized>(
        &self,
        s: &[f64],
        a: &[f64],
        noise_std: f64,
        rng: &mut R,
    ) -> StepOutcome {
        let theta = angle_of(s);
        let torque = a[0] * self.max_torque;
        let gravity_torque = 0.5 * self.mass * self.gravity * self.length * theta.sin();
        let accel = (gravity_torque + torque) / self.inertia();
        let mut theta_dot = s[2] + self.dt * accel;
        if noise_std > 0.0 {
            theta_dot += Normal::new(0.0, noise_std).expect("positive std").sample(rng);
        }
        theta_dot = theta_dot.clamp(-self.max_speed, self.max_speed);
        let next_theta = theta + self.dt * theta_dot;
        StepOutcome {
            s_next: Self::observe(next_theta, theta_dot),
            r: 0.5 * (1.0 + next_theta.cos()),
            done: false,
            action_clipped: false,
        }
    }

    pub fn state_box(&self) -> (Vec<f64>, Vec<f64>) {
        (
            vec![-1.0, -1.0, -self.max_speed],
            vec![1.0, 1.0, self.max_speed],
        )
    }
}
