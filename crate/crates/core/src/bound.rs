//! Exact finite-MDP tools: values, normalized occupancy measures, TV/KL/JS
//! divergences, the value-gap identity and a checker for the return lower
//! bound `J(π, M) ≥ J(π, M̂) − γ·E_ρD[d_TV(T, T̂)] − γ·√(2·d_JS(ρD, ρ̂))`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{MoanError, Result};
use crate::rng::substream;

const ROW_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transition[(s * n_actions + a) * n_states + s']`.
    pub transition: Vec<f64>,
    /// `reward[s * n_actions + a]`.
    pub reward: Vec<f64>,
    pub mu0: Vec<f64>,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub n_states: usize,
    pub n_actions: usize,
    /// `probs[s * n_actions + a]`.
    pub probs: Vec<f64>,
}

/// Normalized discounted state-action occupancy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyMeasure {
    pub n_states: usize,
    pub n_actions: usize,
    /// `rho[s * n_actions + a]`, sums to one.
    pub rho: Vec<f64>,
}

impl OccupancyMeasure {
    pub fn at(&self, s: usize, a: usize) -> f64 {
        self.rho[s * self.n_actions + a]
    }

    /// State marginal `Σ_a ρ(s, a)`.
    pub fn state_marginal(&self) -> Vec<f64> {
        self.rho.chunks(self.n_actions).map(|c| c.iter().sum()).collect()
    }
}

fn check_distribution(p: &[f64], what: &str, tol: f64) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(MoanError::InvalidSpec(format!("{what} has negative or non-finite entries")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(MoanError::InvalidSpec(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

/// Dirichlet(1, …, 1) draw.
fn flat_dirichlet<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

impl TabularMdp {
    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return Err(MoanError::InvalidSpec("MDP needs at least one state and action".into()));
        }
        if self.transition.len() != ns * na * ns {
            return Err(MoanError::dim("transition tensor", ns * na * ns, self.transition.len()));
        }
        if self.reward.len() != ns * na {
            return Err(MoanError::dim("reward matrix", ns * na, self.reward.len()));
        }
        if self.mu0.len() != ns {
            return Err(MoanError::dim("initial distribution", ns, self.mu0.len()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(MoanError::InvalidSpec(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        for (i, row) in self.transition.chunks(ns).enumerate() {
            check_distribution(row, &format!("T[{}][{}]", i / na, i % na), ROW_TOL)?;
        }
        check_distribution(&self.mu0, "mu0", ROW_TOL)?;
        if self.reward.iter().any(|r| !r.is_finite()) {
            return Err(MoanError::InvalidSpec("rewards must be finite".into()));
        }
        Ok(())
    }

    /// Random MDP with Dirichlet(1) transition rows and initial distribution
    /// and uniform rewards in `[0, 1]`.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, gamma: f64, rng: &mut R) -> Self {
        let transition = (0..n_states * n_actions)
            .flat_map(|_| flat_dirichlet(n_states, rng))
            .collect();
        let reward = (0..n_states * n_actions).map(|_| rng.random::<f64>()).collect();
        TabularMdp {
            n_states,
            n_actions,
            transition,
            reward,
            mu0: flat_dirichlet(n_states, rng),
            gamma,
        }
    }

    /// Same rewards, start distribution and discount with fresh random dynamics.
    pub fn with_random_dynamics<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        TabularMdp {
            transition: (0..self.n_states * self.n_actions)
                .flat_map(|_| flat_dirichlet(self.n_states, rng))
                .collect(),
            ..self.clone()
        }
    }

    pub fn t(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    fn same_frame(&self, other: &TabularMdp) -> Result<()> {
        if self.n_states != other.n_states
            || self.n_actions != other.n_actions
            || self.reward != other.reward
            || self.mu0 != other.mu0
            || self.gamma != other.gamma
        {
            return Err(MoanError::InvalidSpec(
                "both MDPs must share states, actions, rewards, mu0 and gamma".into(),
            ));
        }
        Ok(())
    }
}

impl TabularPolicy {
    pub fn validate_for(&self, mdp: &TabularMdp) -> Result<()> {
        if self.n_states != mdp.n_states || self.n_actions != mdp.n_actions {
            return Err(MoanError::InvalidSpec("policy shape does not match the MDP".into()));
        }
        if self.probs.len() != self.n_states * self.n_actions {
            return Err(MoanError::dim("policy matrix", self.n_states * self.n_actions, self.probs.len()));
        }
        for (s, row) in self.probs.chunks(self.n_actions).enumerate() {
            check_distribution(row, &format!("pi[{s}]"), ROW_TOL)?;
        }
        Ok(())
    }

    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, rng: &mut R) -> Self {
        TabularPolicy {
            n_states,
            n_actions,
            probs: (0..n_states).flat_map(|_| flat_dirichlet(n_actions, rng)).collect(),
        }
    }

    pub fn at(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }
}

/// State-to-state kernel `P_π` and reward vector `r_π` under `pi`.
fn policy_kernel(mdp: &TabularMdp, pi: &TabularPolicy) -> (DMatrix<f64>, DVector<f64>) {
    let ns = mdp.n_states;
    let mut p = DMatrix::zeros(ns, ns);
    let mut r = DVector::zeros(ns);
    for s in 0..ns {
        for a in 0..mdp.n_actions {
            let w = pi.at(s, a);
            r[s] += w * mdp.reward[s * mdp.n_actions + a];
            for (s2, t) in mdp.t(s, a).iter().enumerate() {
                p[(s, s2)] += w * t;
            }
        }
    }
    (p, r)
}

fn solve(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    a.lu()
        .solve(&b)
        .ok_or_else(|| MoanError::Domain("singular linear system".into()))
}

/// `V` solving `V = r_π + γ P_π V`, and `J = ⟨μ0, V⟩`.
pub fn exact_value(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<(Vec<f64>, f64)> {
    mdp.validate()?;
    pi.validate_for(mdp)?;
    let (p, r) = policy_kernel(mdp, pi);
    let n = mdp.n_states;
    let v = solve(DMatrix::identity(n, n) - p * mdp.gamma, r)?;
    let j = v.iter().zip(&mdp.mu0).map(|(v, m)| v * m).sum();
    Ok((v.iter().copied().collect(), j))
}

/// `ρ(s, a) = π(a|s)·d(s)` with `d = (1 − γ) Σ_t γ^t P(s_t = s)`.
pub fn occupancy(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<OccupancyMeasure> {
    mdp.validate()?;
    pi.validate_for(mdp)?;
    let (p, _) = policy_kernel(mdp, pi);
    let n = mdp.n_states;
    let mu0 = DVector::from_column_slice(&mdp.mu0);
    let d = solve(DMatrix::identity(n, n) - p.transpose() * mdp.gamma, mu0)? * (1.0 - mdp.gamma);
    let rho = (0..n)
        .flat_map(|s| (0..mdp.n_actions).map(move |a| (s, a)))
        .map(|(s, a)| (pi.at(s, a) * d[s]).max(0.0))
        .collect();
    Ok(OccupancyMeasure {
        n_states: n,
        n_actions: mdp.n_actions,
        rho,
    })
}

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(MoanError::dim("distribution pair", p.len(), q.len()));
    }
    if p.iter().chain(q).any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(MoanError::Domain("distributions must be non-negative and finite".into()));
    }
    Ok(())
}

/// `½ Σ |p − q|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// `Σ p log(p / q)` in nats; `+∞` when `p` is not absolutely continuous w.r.t. `q`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    let mut total = 0.0;
    for (a, b) in p.iter().zip(q) {
        if *a > 0.0 {
            if *b == 0.0 {
                return Ok(f64::INFINITY);
            }
            total += a * (a / b).ln();
        }
    }
    Ok(total.max(0.0))
}

/// `½ KL(p‖m) + ½ KL(q‖m)` with `m = (p + q)/2`; never infinite.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok((0.5 * kl_divergence(p, &m)? + 0.5 * kl_divergence(q, &m)?).clamp(0.0, std::f64::consts::LN_2))
}

/// Both sides of `J(π, M) − J(π, M̂) = −γ/(1 − γ) · E_ρ̂[Z]`, where
/// `Z(s, a) = E_{T̂}[V_M(s')] − E_T[V_M(s')]` and `ρ̂` is the normalized
/// occupancy of `π` in `M̂`. The `1/(1 − γ)` factor converts the normalized
/// occupancy back to discounted visitation counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapIdentity {
    pub lhs: f64,
    pub rhs: f64,
    pub abs_error: f64,
}

pub fn value_gap_identity(m: &TabularMdp, m_hat: &TabularMdp, pi: &TabularPolicy) -> Result<GapIdentity> {
    m.same_frame(m_hat)?;
    let (v, j) = exact_value(m, pi)?;
    let (_, j_hat) = exact_value(m_hat, pi)?;
    let rho_hat = occupancy(m_hat, pi)?;
    let mut expectation = 0.0;
    for s in 0..m.n_states {
        for a in 0..m.n_actions {
            let dot = |t: &[f64]| t.iter().zip(&v).map(|(p, v)| p * v).sum::<f64>();
            let z = dot(m_hat.t(s, a)) - dot(m.t(s, a));
            expectation += rho_hat.at(s, a) * z;
        }
    }
    let lhs = j - j_hat;
    let rhs = -m.gamma / (1.0 - m.gamma) * expectation;
    Ok(GapIdentity {
        lhs,
        rhs,
        abs_error: (lhs - rhs).abs(),
    })
}

/// Evaluation of the return lower bound for one tabular instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    /// Factor applied to the rewards so that `‖V_M^π‖∞ ≤ δ`.
    pub reward_scale: f64,
    /// `J(π, M)`.
    pub lhs: f64,
    /// `J(π, M̂)`.
    pub j_model: f64,
    /// `E_{ρ_M^{π_D}}[d_TV(T(·|s,a), T̂(·|s,a))]`.
    pub model_error_term: f64,
    /// `√(2·d_JS(ρ_M^{π_D}, ρ_{M̂}^π))`.
    pub discrepancy_term: f64,
    /// `J(π, M̂) − γ·(model_error_term + discrepancy_term)`.
    pub rhs: f64,
    pub slack: f64,
    pub holds: bool,
    /// Smallest `c ≥ 0` with `J(π, M) ≥ J(π, M̂) − c·γ·(…)`; infinite when no
    /// multiplier can close the gap.
    pub c_star: f64,
}

/// Bisection for the minimal penalty multiplier.
fn minimal_multiplier(lhs: f64, j_model: f64, penalty: f64) -> f64 {
    let holds = |c: f64| lhs >= j_model - c * penalty;
    if holds(0.0) {
        return 0.0;
    }
    if penalty <= 0.0 {
        return f64::INFINITY;
    }
    let mut hi = 1.0;
    while !holds(hi) {
        hi *= 2.0;
        if !hi.is_finite() {
            return f64::INFINITY;
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if holds(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    hi
}

pub fn theorem1_check(
    m: &TabularMdp,
    m_hat: &TabularMdp,
    pi: &TabularPolicy,
    pi_d: &TabularPolicy,
    value_bound_delta: f64,
) -> Result<Theorem1Report> {
    if !(value_bound_delta > 0.0) {
        return Err(MoanError::Domain("value bound delta must be positive".into()));
    }
    m.same_frame(m_hat)?;
    let (v, _) = exact_value(m, pi)?;
    let v_max = v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    let reward_scale = if v_max > value_bound_delta {
        value_bound_delta / v_max
    } else {
        1.0
    };
    let scaled = |mdp: &TabularMdp| TabularMdp {
        reward: mdp.reward.iter().map(|r| r * reward_scale).collect(),
        ..mdp.clone()
    };
    let (m, m_hat) = (scaled(m), scaled(m_hat));
    let (_, lhs) = exact_value(&m, pi)?;
    let (_, j_model) = exact_value(&m_hat, pi)?;
    let rho_d = occupancy(&m, pi_d)?;
    let rho_hat = occupancy(&m_hat, pi)?;
    let mut model_error_term = 0.0;
    for s in 0..m.n_states {
        for a in 0..m.n_actions {
            model_error_term += rho_d.at(s, a) * tv_distance(m.t(s, a), m_hat.t(s, a))?;
        }
    }
    let discrepancy_term = (2.0 * js_divergence(&rho_d.rho, &rho_hat.rho)?).sqrt();
    let penalty = m.gamma * (model_error_term + discrepancy_term);
    let rhs = j_model - penalty;
    Ok(Theorem1Report {
        reward_scale,
        lhs,
        j_model,
        model_error_term,
        discrepancy_term,
        rhs,
        slack: lhs - rhs,
        holds: lhs >= rhs,
        c_star: minimal_multiplier(lhs, j_model, penalty),
    })
}

/// `sup_{f ∈ {±δ}^n} |E_p f − E_q f|` by enumerating every sign vector.
pub fn ipm_bruteforce(p: &[f64], q: &[f64], delta: f64) -> Result<f64> {
    check_pair(p, q)?;
    if p.len() > 20 {
        return Err(MoanError::Domain("brute force limited to supports of size 20".into()));
    }
    let n = p.len();
    let mut best = 0.0f64;
    for mask in 0u32..(1u32 << n) {
        let gap: f64 = (0..n)
            .map(|i| {
                let f = if mask >> i & 1 == 1 { delta } else { -delta };
                f * (p[i] - q[i])
            })
            .sum();
        best = best.max(gap.abs());
    }
    Ok(best)
}

/// One random `(M, M̂, π, π_D)` instance with shared rewards, start
/// distribution and discount.
#[derive(Debug, Clone)]
pub struct BoundInstance {
    pub m: TabularMdp,
    pub m_hat: TabularMdp,
    pub pi: TabularPolicy,
    pub pi_d: TabularPolicy,
}

pub fn random_instance(seed: u64, n_states: usize, n_actions: usize, gamma: f64) -> BoundInstance {
    let mut rng = substream(seed, "bound-instance", 0);
    let m = TabularMdp::random(n_states, n_actions, gamma, &mut rng);
    let m_hat = m.with_random_dynamics(&mut rng);
    BoundInstance {
        pi: TabularPolicy::random(n_states, n_actions, &mut rng),
        pi_d: TabularPolicy::random(n_states, n_actions, &mut rng),
        m,
        m_hat,
    }
}
