//! Dynamics-ensemble behavior on synthetic data with known structure.

use moan::env::{BehaviorTag, Transition, TransitionDataset};
use moan::model::{train_adversarial, ModelTrainConfig};
use moan::rng::substream;
use rand::Rng;

fn small_config(alpha: f64, seed: u64) -> ModelTrainConfig {
    ModelTrainConfig {
        ensemble_size: 3,
        hidden: vec![32, 32],
        disc_hidden: vec![32, 32],
        alpha,
        batch_size: 128,
        max_epochs: 40,
        seed,
        ..ModelTrainConfig::default()
    }
}

fn dataset(records: Vec<Transition>, d_s: usize, d_a: usize) -> TransitionDataset {
    TransitionDataset::from_records("synthetic", d_s, d_a, BehaviorTag::Random, 0, records).unwrap()
}

fn record(s: Vec<f64>, a: Vec<f64>, s_next: Vec<f64>, r: f64) -> Transition {
    let f = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect();
    Transition {
        s: f(s),
        a: f(a),
        s_next: f(s_next),
        r: r as f32,
        done: false,
        terminal: false,
    }
}

const A: [[f64; 2]; 2] = [[0.9, 0.2], [-0.1, 0.8]];
const B: [f64; 2] = [0.3, -0.5];

fn linear_step(s: &[f64], a: f64) -> (Vec<f64>, f64) {
    let next = (0..2).map(|i| A[i][0] * s[0] + A[i][1] * s[1] + B[i] * a).collect();
    (next, 0.5 * s[0] - 0.25 * a)
}

fn linear_records(n: usize, seed: u64) -> Vec<Transition> {
    let mut rng = substream(seed, "linear-toy", 0);
    (0..n)
        .map(|_| {
            let s = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let a = rng.random_range(-1.0..1.0);
            let (next, r) = linear_step(&s, a);
            record(s, vec![a], next, r)
        })
        .collect()
}

#[test]
fn noiseless_linear_dynamics_are_recovered() {
    let data = dataset(linear_records(6000, 1), 2, 1);
    let (ensemble, _, _) = train_adversarial(&data, &small_config(0.1, 0)).unwrap();
    let holdout = linear_records(500, 2);
    let mut abs_err = [0.0f64; 3];
    for t in &holdout {
        let s: Vec<f64> = t.s.iter().map(|&v| f64::from(v)).collect();
        let a = f64::from(t.a[0]);
        let (next, r) = linear_step(&s, a);
        for k in 0..ensemble.len() {
            let p = ensemble.predict(k, &s, &[a]).unwrap();
            for d in 0..2 {
                abs_err[d] += (s[d] + p.mean[d] - next[d]).abs();
            }
            abs_err[2] += (p.mean[2] - r).abs();
        }
    }
    let n = (holdout.len() * ensemble.len()) as f64;
    for (d, e) in abs_err.iter().enumerate() {
        assert!(e / n <= 1e-2, "dimension {d}: mean absolute error {}", e / n);
    }
}

#[test]
fn generated_samples_cover_both_modes_of_a_bimodal_toy() {
    // s' = s ± 0.5 with equal probability, independent of the action
    let mut rng = substream(3, "bimodal-toy", 0);
    let records = (0..6000)
        .map(|_| {
            let s = rng.random_range(-1.0..1.0);
            let a = rng.random_range(-1.0..1.0);
            let jump = if rng.random_bool(0.5) { 0.5 } else { -0.5 };
            record(vec![s], vec![a], vec![s + jump], 0.0)
        })
        .collect();
    let data = dataset(records, 1, 1);
    let (ensemble, _, _) = train_adversarial(&data, &small_config(0.1, 0)).unwrap();

    // ε-balls of radius 0.25 around the two modes do not overlap
    let radius = 0.25;
    let draws = 4000;
    let (mut up, mut down) = (0, 0);
    for _ in 0..draws {
        let s = rng.random_range(-0.8..0.8);
        let a = rng.random_range(-1.0..1.0);
        let (next, _, _) = ensemble.sample_next(&[s], &[a], &mut rng).unwrap();
        let jump = next[0] - s;
        up += usize::from((jump - 0.5).abs() < radius);
        down += usize::from((jump + 0.5).abs() < radius);
    }
    let (up, down) = (up as f64 / draws as f64, down as f64 / draws as f64);
    assert!(up >= 0.2 && down >= 0.2, "mode coverage: upper {up:.3}, lower {down:.3}");
}

#[test]
fn discriminator_accuracy_settles_near_chance() {
    let env = moan::env::ContinuousEnv::pointmass2d();
    let data = moan::env::generate_dataset(&env, BehaviorTag::Random, 8000, 5, None).unwrap();
    let (_, _, report) = train_adversarial(&data, &small_config(0.1, 1)).unwrap();
    let last = *report.disc_accuracy.last().unwrap();
    assert!((0.5..=0.75).contains(&last), "held-out discriminator accuracy {last:.3}");
}

#[test]
fn early_stopping_keeps_the_best_holdout_epoch() {
    let data = dataset(linear_records(3000, 4), 2, 1);
    let cfg = ModelTrainConfig {
        max_epochs: 15,
        patience: 2,
        ..small_config(0.0, 2)
    };
    let (ensemble, _, report) = train_adversarial(&data, &cfg).unwrap();
    let means: Vec<f64> = report
        .holdout_mse
        .iter()
        .map(|m| m.iter().sum::<f64>() / m.len() as f64)
        .collect();
    let argmin = means
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i + 1)
        .unwrap();
    assert_eq!(report.best_epoch, argmin);
    assert!(report.stop_epoch >= report.best_epoch);
    assert_eq!(report.holdout_mse.len(), report.stop_epoch);
    assert_eq!(ensemble.len(), 3);
}
