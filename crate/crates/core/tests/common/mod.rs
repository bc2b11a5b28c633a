//! Independent oracles shared by the integration and acceptance tests.
//!
//! Nothing here calls into the library's networks, losses or optimizers:
//! the maximum-likelihood ensemble trainer, the finite differences and the
//! rank correlation are all written from scratch.

#![allow(dead_code)]

use moan::env::Transition;
use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- finite differences

/// Central differences `(f(x + h e_i) − f(x − h e_i)) / 2h`.
pub fn central_differences(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + h;
            let up = f(&work);
            work[i] = orig - h;
            let down = f(&work);
            work[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − n‖₂ / max(‖a‖₂ + ‖n‖₂, 1e-12)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    diff / scale.max(1e-12)
}

// ---------------------------------------------------------------- statistics

/// Ranks starting at 1, ties receive their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut out = vec![0.0; x.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && x[idx[end]] == x[idx[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            out[i] = avg;
        }
        start = end;
    }
    out
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

// ---------------------------------------------------------------- MLE ensemble oracle

const LV_MIN: f64 = -10.0;
const LV_MAX: f64 = 2.0;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Raw output → bounded log-variance and its derivative.
fn bounded_log_var(raw: f64) -> (f64, f64) {
    let upper = LV_MAX - softplus(LV_MAX - raw);
    let lv = LV_MIN + softplus(upper - LV_MIN);
    (lv, logistic(LV_MAX - raw) * logistic(upper - LV_MIN))
}

#[derive(Clone)]
struct Mlp {
    w: Vec<Array2<f64>>,
    b: Vec<Array1<f64>>,
}

impl Mlp {
    fn new(widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut w = Vec::new();
        let mut b = Vec::new();
        for pair in widths.windows(2) {
            // uniform fan-in scaling for weights and biases
            let bound = 1.0 / (pair[0] as f64).sqrt();
            w.push(Array2::from_shape_simple_fn((pair[0], pair[1]), || rng.random_range(-bound..bound)));
            b.push(Array1::from_shape_simple_fn(pair[1], || rng.random_range(-bound..bound)));
        }
        Mlp { w, b }
    }

    /// Output plus pre-activations and activations of every layer.
    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Vec<Array2<f64>>) {
        let mut acts = vec![x.clone()];
        let last = self.w.len() - 1;
        for (l, (w, b)) in self.w.iter().zip(&self.b).enumerate() {
            let z = acts[l].dot(w) + b;
            acts.push(if l < last { z.mapv(|v| v.max(0.0)) } else { z });
        }
        (acts.last().unwrap().clone(), acts)
    }

    fn backward(&self, acts: &[Array2<f64>], d_out: Array2<f64>) -> (Vec<Array2<f64>>, Vec<Array1<f64>>) {
        let n = self.w.len();
        let mut gw = vec![Array2::zeros((0, 0)); n];
        let mut gb = vec![Array1::zeros(0); n];
        let mut delta = d_out;
        for l in (0..n).rev() {
            gw[l] = acts[l].t().dot(&delta);
            gb[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut up = delta.dot(&self.w[l].t());
                up.zip_mut_with(&acts[l], |d, a| {
                    if *a <= 0.0 {
                        *d = 0.0
                    }
                });
                delta = up;
            }
        }
        (gw, gb)
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    lr: f64,
}

impl Adam {
    fn new(mlp: &Mlp, lr: f64) -> Self {
        let sizes: Vec<usize> = mlp.w.iter().map(|w| w.len()).chain(mlp.b.iter().map(|b| b.len())).collect();
        Adam {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
            lr,
        }
    }

    fn step(&mut self, mlp: &mut Mlp, gw: &[Array2<f64>], gb: &[Array1<f64>]) {
        self.t += 1;
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let params = mlp
            .w
            .iter_mut()
            .map(|w| w.as_slice_mut().unwrap())
            .chain(mlp.b.iter_mut().map(|b| b.as_slice_mut().unwrap()));
        let grads = gw.iter().map(|g| g.as_slice().unwrap()).chain(gb.iter().map(|g| g.as_slice().unwrap()));
        for (k, (p, g)) in params.zip(grads).enumerate() {
            for i in 0..p.len() {
                self.m[k][i] = b1 * self.m[k][i] + (1.0 - b1) * g[i];
                self.v[k][i] = b2 * self.v[k][i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= self.lr * (self.m[k][i] / c1) / ((self.v[k][i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Plain Gaussian maximum-likelihood ensemble over normalized `(Δs, r)`.
pub struct MleOracle {
    members: Vec<Mlp>,
    x_mean: Array1<f64>,
    x_std: Array1<f64>,
    y_mean: Array1<f64>,
    y_std: Array1<f64>,
    pub epochs_run: usize,
}

pub struct OracleConfig {
    pub members: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
}

/// `(x, y)` rows: `x = (s, a)`, `y = (s' − s, r)`.
pub fn xy(records: &[Transition]) -> (Array2<f64>, Array2<f64>) {
    let d_s = records[0].s.len();
    let d_a = records[0].a.len();
    let mut x = Array2::zeros((records.len(), d_s + d_a));
    let mut y = Array2::zeros((records.len(), d_s + 1));
    for (i, t) in records.iter().enumerate() {
        for k in 0..d_s {
            x[[i, k]] = f64::from(t.s[k]);
            y[[i, k]] = f64::from(t.s_next[k]) - f64::from(t.s[k]);
        }
        for k in 0..d_a {
            x[[i, d_s + k]] = f64::from(t.a[k]);
        }
        y[[i, d_s]] = f64::from(t.r);
    }
    (x, y)
}

fn column_stats(m: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = m.mean_axis(Axis(0)).unwrap();
    let std = m.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-6));
    (mean, std)
}

impl MleOracle {
    pub fn train(records: &[Transition], cfg: &OracleConfig) -> MleOracle {
        let (x_raw, y_raw) = xy(records);
        let (x_mean, x_std) = column_stats(&x_raw);
        let (y_mean, y_std) = column_stats(&y_raw);
        let x = (&x_raw - &x_mean) / &x_std;
        let y = (&y_raw - &y_mean) / &y_std;
        let d_x = x.ncols();
        let d_y = y.ncols();

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0A0C_1E00);
        let mut order: Vec<usize> = (0..x.nrows()).collect();
        order.shuffle(&mut rng);
        let n_hold = ((x.nrows() as f64) * cfg.holdout_fraction).round() as usize;
        let (hold_idx, train_idx) = order.split_at(n_hold);
        let xh = x.select(Axis(0), hold_idx);
        let yh = y.select(Axis(0), hold_idx);

        let mut widths = vec![d_x];
        widths.extend(&cfg.hidden);
        widths.push(2 * d_y);
        let mut members: Vec<Mlp> = (0..cfg.members).map(|_| Mlp::new(&widths, &mut rng)).collect();
        let mut opts: Vec<Adam> = members.iter().map(|m| Adam::new(m, cfg.lr)).collect();
        let holdout_mse = |members: &[Mlp]| -> f64 {
            members
                .iter()
                .map(|m| {
                    let (out, _) = m.forward(&xh);
                    let err = &out.slice(s![.., ..d_y]) - &yh;
                    err.mapv(|e| e * e).mean().unwrap()
                })
                .sum::<f64>()
                / members.len() as f64
        };
        let mut best = (holdout_mse(&members), members.clone());
        let mut since_best = 0;
        let mut epochs_run = 0;
        let mut idx = train_idx.to_vec();
        for _ in 0..cfg.max_epochs {
            epochs_run += 1;
            for (m, opt) in members.iter_mut().zip(&mut opts) {
                idx.shuffle(&mut rng);
                for chunk in idx.chunks(cfg.batch) {
                    let xb = x.select(Axis(0), chunk);
                    let yb = y.select(Axis(0), chunk);
                    let (out, acts) = m.forward(&xb);
                    let n = chunk.len() as f64;
                    let mut d_out = Array2::zeros(out.raw_dim());
                    for i in 0..chunk.len() {
                        for j in 0..d_y {
                            let (lv, dlv) = bounded_log_var(out[[i, d_y + j]]);
                            let inv = (-lv).exp();
                            let r = yb[[i, j]] - out[[i, j]];
                            d_out[[i, j]] = -r * inv / n;
                            d_out[[i, d_y + j]] = 0.5 * (1.0 - r * r * inv) * dlv / n;
                        }
                    }
                    let (gw, gb) = m.backward(&acts, d_out);
                    opt.step(m, &gw, &gb);
                }
            }
            let mse = holdout_mse(&members);
            if mse < best.0 {
                best = (mse, members.clone());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
        MleOracle {
            members: best.1,
            x_mean,
            x_std,
            y_mean,
            y_std,
            epochs_run,
        }
    }

    /// Mean over members of the raw-unit MSE of the predicted mean `(Δs, r)`.
    pub fn test_mse(&self, records: &[Transition]) -> f64 {
        let (x_raw, y_raw) = xy(records);
        let x = (&x_raw - &self.x_mean) / &self.x_std;
        let d_y = y_raw.ncols();
        self.members
            .iter()
            .map(|m| {
                let (out, _) = m.forward(&x);
                let pred = &out.slice(s![.., ..d_y]) * &self.y_std + &self.y_mean;
                (&pred - &y_raw).mapv(|e| e * e).mean().unwrap()
            })
            .sum::<f64>()
            / self.members.len() as f64
    }
}
