//! Planar point mass with a wall between the start region and the goal.
//!
//! State is `(x, y, vx, vy)`, action is a commanded acceleration in `[-1, 1]^2`.
//! Velocities are per unit time and positions advance by `dt · v` per step,
//! so both halves of the state live on a comparable scale.
//! A vertical wall rises from the bottom edge of the arena to `wall_top`; the
//! only way to the goal is over its free end. Running into the wall stops the
//! agent against it: the blocked normal component of its motion is discarded
//! and the step pays `crash_penalty`. With `crash_terminal` the contact state
//! is absorbing and ends the episode, so a trajectory that tries to cut through
//! the wall forfeits the rest of its return.
//!
//! Rewards are shaped by geodesic distance to the goal (shortest path that
//! goes around the wall), so a model that has never seen the wall believes
//! the straight line through it is the fastest route.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::StepOutcome;

pub type Point = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PointMass2d {
    /// Integration step.
    pub dt: f64,
    pub damping: f64,
    pub gain: f64,
    pub max_speed: f64,
    pub wall_x: f64,
    pub wall_top: f64,
    pub goal: Point,
    pub start_low: Point,
    pub start_high: Point,
    pub crash_penalty: f64,
    pub crash_terminal: bool,
    /// Geodesic distance mapped to zero reward.
    pub reward_scale: f64,
}

impl Default for PointMass2d {
    fn default() -> Self {
        PointMass2d {
            dt: 0.1,
            damping: 0.6,
            gain: 0.4,
            max_speed: 1.0,
            wall_x: 0.0,
            wall_top: 0.5,
            goal: [0.8, 0.0],
            start_low: [-0.9, -0.1],
            start_high: [-0.7, 0.1],
            crash_penalty: 1.0,
            crash_terminal: true,
            reward_scale: 2.0,
        }
    }
}

pub const ARENA: f64 = 1.0;

/// Closed segment intersection test (touching counts).
pub fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    fn orient(a: Point, b: Point, c: Point) -> f64 {
        (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    }
    fn on_segment(a: Point, b: Point, c: Point) -> bool {
        c[0] >= a[0].min(b[0])
            && c[0] <= a[0].max(b[0])
            && c[1] >= a[1].min(b[1])
            && c[1] <= a[1].max(b[1])
    }
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl PointMass2d {
    pub fn wall(&self) -> (Point, Point) {
        ([self.wall_x, -ARENA], [self.wall_x, self.wall_top])
    }

    pub fn crosses_wall(&self, from: Point, to: Point) -> bool {
        let (w1, w2) = self.wall();
        segments_intersect(from, to, w1, w2)
    }

    /// Shortest-path distance to the goal around the wall's free end.
    pub fn geodesic_to_goal(&self, p: Point) -> f64 {
        if self.crosses_wall(p, self.goal) {
            let corner = [self.wall_x, self.wall_top];
            dist(p, corner) + dist(corner, self.goal)
        } else {
            dist(p, self.goal)
        }
    }

    pub fn position_reward(&self, p: Point) -> f64 {
        (1.0 - self.geodesic_to_goal(p) / self.reward_scale).clamp(0.0, 1.0)
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let x = rng.random_range(self.start_low[0]..=self.start_high[0]);
        let y = rng.random_range(self.start_low[1]..=self.start_high[1]);
        vec![x, y, 0.0, 0.0]
    }

    pub fn step<R: Rng + ?Sized>(
        &self,
        s: &[f64],
        a: &[f64],
        noise_std: f64,
        rng: &mut R,
    ) -> StepOutcome {
        let p = [s[0], s[1]];
        // independent noise on every state component keeps a diagonal
        // Gaussian model well specified
        let mut noise = || {
            if noise_std > 0.0 {
                Normal::new(0.0, noise_std).expect("positive std").sample(rng)
            } else {
                0.0
            }
        };
        let mut v = [0.0; 2];
        let mut next = [0.0; 2];
        for k in 0..2 {
            let v_clean = (self.damping * s[2 + k] + self.gain * a[k]).clamp(-self.max_speed, self.max_speed);
            next[k] = p[k] + self.dt * v_clean + noise();
            v[k] = (v_clean + noise()).clamp(-self.max_speed, self.max_speed);
        }
        let mut at_edge = [false; 2];
        for k in 0..2 {
            if next[k].abs() > ARENA {
                next[k] = next[k].clamp(-ARENA, ARENA);
                at_edge[k] = true;
            }
        }
        let mut crashed = false;
        if self.crosses_wall(p, next) {
            crashed = true;
            // drop the component normal to the (vertical) wall and retry
            v[0] = 0.0;
            next = [p[0], next[1]];
            if self.crosses_wall(p, next) {
                v[1] = 0.0;
                next = p;
            }
        }
        for k in 0..2 {
            if at_edge[k] {
                v[k] = 0.0;
            }
        }
        let mut r = self.position_reward(next);
        if crashed {
            r -= self.crash_penalty;
        }
        StepOutcome {
            s_next: vec![next[0], next[1], v[0], v[1]],
            r,
            done: crashed && self.crash_terminal,
            action_clipped: false,
        }
    }

    pub fn state_box(&self) -> (Vec<f64>, Vec<f64>) {
        (
            vec![-ARENA, -ARENA, -self.max_speed, -self.max_speed],
            vec![ARENA, ARENA, self.max_speed, self.max_speed],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn zero_action_at_rest_is_stationary() {
        let env = PointMass2d::default();
        let mut rng = seeded(0);
        let s = vec![-0.4, 0.3, 0.0, 0.0];
        let out = env.step(&s, &[0.0, 0.0], 0.0, &mut rng);
        assert_eq!(out.s_next, s);
        assert!(!out.done);
    }

    #[test]
    fn wall_blocks_normal_motion() {
        let env = PointMass2d::default();
        let mut rng = seeded(0);
        let s = vec![-0.02, 0.0, 1.0, 0.3];
        let out = env.step(&s, &[1.0, 1.0], 0.0, &mut rng);
        assert_eq!(out.s_next[0], s[0], "x unchanged along the wall normal");
        assert!(out.s_next[1] > s[1], "tangential motion kept");
        assert_eq!(out.s_next[2], 0.0);
        assert!(out.done, "contact ends the episode");
        assert!(out.r < 0.0);
        let soft = PointMass2d {
            crash_terminal: false,
            ..PointMass2d::default()
        };
        assert!(!soft.step(&s, &[1.0, 1.0], 0.0, &mut rng).done);
    }

    #[test]
    fn passing_over_the_wall_is_free() {
        let env = PointMass2d::default();
        let mut rng = seeded(0);
        let s = vec![-0.02, 0.7, 1.0, 0.0];
        let out = env.step(&s, &[1.0, 0.0], 0.0, &mut rng);
        assert!(out.s_next[0] > 0.0);
        assert!(!out.done);
    }

    #[test]
    fn geodesic_goes_around_the_wall() {
        let env = PointMass2d::default();
        let straight = dist([-0.8, 0.0], env.goal);
        let around = env.geodesic_to_goal([-0.8, 0.0]);
        assert!(around > straight);
        let corner = [0.0, 0.5];
        assert!((around - dist([-0.8, 0.0], corner) - dist(corner, env.goal)).abs() < 1e-12);
        assert_eq!(env.geodesic_to_goal(env.goal), 0.0);
        assert_eq!(env.position_reward(env.goal), 1.0);
    }

    #[test]
    fn segment_intersection_cases() {
        assert!(segments_intersect([0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]));
        assert!(!segments_intersect([0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]));
        // touching endpoint counts
        assert!(segments_intersect([0.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 1.0]));
        // collinear overlap
        assert!(segments_intersect([0.0, 0.0], [2.0, 0.0], [1.0, 0.0], [3.0, 0.0]));
    }
}
