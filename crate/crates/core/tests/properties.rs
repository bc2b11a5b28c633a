//! Randomized properties of the divergences, the likelihood and the reward penalty.

use moan::bound::{js_divergence, kl_divergence, tv_distance};
use moan::nn::{gaussian_nll, GaussianOutput};
use moan::penalty::reshape_reward;
use proptest::prelude::*;

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(|w| {
        let t: f64 = w.iter().sum();
        w.into_iter().map(|v| v / t).collect()
    })
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..10).prop_flat_map(|n| (distribution(n), distribution(n)))
}

proptest! {
    #[test]
    fn divergences_are_ordered_and_symmetric((p, q) in pair()) {
        let tv = tv_distance(&p, &q).unwrap();
        let js = js_divergence(&p, &q).unwrap();
        prop_assert!((0.0..=1.0).contains(&tv));
        prop_assert!((0.0..=std::f64::consts::LN_2).contains(&js));
        prop_assert!((js - js_divergence(&q, &p).unwrap()).abs() < 1e-12);
        prop_assert!(tv <= (2.0 * js).sqrt() + 1e-12);
        // Pinsker on the directed divergence
        prop_assert!(tv <= (0.5 * kl_divergence(&p, &q).unwrap()).sqrt() + 1e-12);
    }

    #[test]
    fn likelihood_is_smallest_at_the_target(
        target in prop::collection::vec(-5.0f64..5.0, 1..5),
        log_var in -3.0f64..2.0,
        shift in 0.01f64..2.0,
        dim in 0usize..5,
    ) {
        let out = |mean: Vec<f64>| GaussianOutput { log_variance: vec![log_var; mean.len()], mean };
        let at = gaussian_nll(&out(target.clone()), &target).unwrap();
        let mut moved = target.clone();
        let k = dim % moved.len();
        moved[k] += shift;
        prop_assert!(gaussian_nll(&out(moved), &target).unwrap() > at);
    }

    #[test]
    fn penalty_never_raises_the_reward(
        r in -10.0f64..10.0,
        sigma in 0.0f64..5.0,
        u in 0.001f64..0.999,
        eta in 0.0f64..3.0,
    ) {
        let b = reshape_reward(r, sigma, u, eta).unwrap();
        prop_assert!(b.r_shaped <= r);
        prop_assert!((r - b.r_shaped - eta * b.magnitude()).abs() < 1e-9);
        let stronger = reshape_reward(r, sigma, u, eta + 0.5).unwrap();
        prop_assert!(stronger.r_shaped <= b.r_shaped);
    }
}
