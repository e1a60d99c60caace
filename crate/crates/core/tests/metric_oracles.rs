use ptss::metrics::{accuracy, adjusted_rand_index, macro_f1};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod support;
use support::{ari_pairs, f1_oracle, labelings};

#[test]
fn exhaustive_small_labelings() {
    for n in 1..=6 {
        for k in 1..=3 {
            let all = labelings(n, k);
            for truth in &all {
                for pred in &all {
                    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
                    assert_eq!(accuracy(pred, truth).unwrap(), correct as f64 / n as f64);
                    let f1 = macro_f1(pred, truth, k).unwrap();
                    assert!((f1 - f1_oracle(pred, truth, k)).abs() <= 1e-12, "{pred:?} {truth:?}");
                    if n >= 2 {
                        let ari = adjusted_rand_index(pred, truth).unwrap();
                        assert!((ari - ari_pairs(pred, truth)).abs() <= 1e-12, "{pred:?} {truth:?}");
                    }
                }
            }
        }
    }
}

#[test]
fn random_labelings_have_zero_mean_ari() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut sum = 0.0;
    for _ in 0..1000 {
        let a: Vec<usize> = (0..50).map(|_| rng.random_range(0..4)).collect();
        let b: Vec<usize> = (0..50).map(|_| rng.random_range(0..4)).collect();
        sum += adjusted_rand_index(&a, &b).unwrap();
    }
    assert!((sum / 1000.0).abs() <= 0.05);
}

fn pair_strategy() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, Vec<usize>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(0usize..5, n),
            prop::collection::vec(0usize..5, n),
            Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
        )
    })
}

proptest! {
    #[test]
    fn metrics_ignore_relabeling((a, b, perm) in pair_strategy()) {
        let pa: Vec<usize> = a.iter().map(|&x| perm[x]).collect();
        let pb: Vec<usize> = b.iter().map(|&x| perm[x]).collect();
        prop_assert_eq!(accuracy(&a, &b).unwrap(), accuracy(&pa, &pb).unwrap());
        prop_assert!((macro_f1(&a, &b, 5).unwrap() - macro_f1(&pa, &pb, 5).unwrap()).abs() < 1e-12);
        prop_assert!((adjusted_rand_index(&a, &b).unwrap() - adjusted_rand_index(&pa, &pb).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ari_is_symmetric_and_bounded((a, b, _p) in pair_strategy()) {
        let ab = adjusted_rand_index(&a, &b).unwrap();
        prop_assert!((ab - adjusted_rand_index(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((-0.5 - 1e-12..=1.0 + 1e-12).contains(&ab));
        let f1 = macro_f1(&a, &b, 5).unwrap();
        prop_assert!((0.0..=1.0).contains(&f1));
    }
}
