mod common;

use common::oracles::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selfspk::backend::Plda;
use selfspk::metrics::{eer, min_dcf_default};

#[test]
fn brute_force_oracle_reproduces_worked_examples() {
    assert_eq!(brute_eer(&[1.0, 3.0], &[0.0, 2.0]), 25.0);
    assert_eq!(brute_eer(&[2.0, 3.0], &[0.0, 1.0]), 0.0);
    assert_eq!(brute_eer(&[4.0, 1.0, 1.0], &[1.0, 4.0, 1.0]), 50.0);
}

#[test]
fn metrics_equal_brute_force_sweep() {
    assert_eq!(metrics_against_oracle(300, 17), Ok(300));
}

#[test]
fn plda_matches_one_dimensional_gaussian_ratio() {
    let err = plda_1d_max_error(3);
    assert!(err < 1e-8, "max error {err:e}");
}

#[test]
fn plda_matches_dense_gaussian_ratio() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let d = 3;
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let c = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let b = &a * a.transpose();
        let w = &c * c.transpose() + DMatrix::identity(d, d) * 0.5;
        let mu = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let plda = Plda::new(mu.clone(), b.clone(), w.clone()).unwrap();
        let u = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
        let v = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
        let got = plda.score(&u, &v).unwrap();
        let want = plda_dense_llr(&mu, &b, &w, &u, &v);
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
    }
}

#[test]
fn stats_pooling_matches_two_pass() {
    let err = pooling_max_error(5);
    assert!(err < 1e-6, "max relative error {err:e}");
}

fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![(-20i32..20).prop_map(|v| v as f64 / 4.0), -5.0f64..5.0], 1..60)
}

proptest! {
    #[test]
    fn eer_and_min_dcf_are_bounded(t in scores(), n in scores()) {
        let e = eer(&t, &n).unwrap();
        prop_assert!((0.0..=50.0).contains(&e), "EER {}", e);
        let d = min_dcf_default(&t, &n).unwrap();
        prop_assert!((0.0..=1.0).contains(&d), "minDCF {}", d);
    }

    #[test]
    fn metrics_ignore_increasing_affine_maps(t in scores(), n in scores(), a in 0.01f64..100.0, b in -50.0f64..50.0) {
        let f = |v: &Vec<f64>| v.iter().map(|x| a * x + b).collect::<Vec<_>>();
        // An affine map can merge or split nearly equal floats; the quantized
        // grid here is exactly representable, so order and ties survive.
        prop_assume!({
            let mut all: Vec<f64> = t.iter().chain(&n).copied().collect();
            all.sort_by(f64::total_cmp);
            let mapped: Vec<f64> = all.iter().map(|x| a * x + b).collect();
            all.windows(2).zip(mapped.windows(2)).all(|(o, m)| (o[0] < o[1]) == (m[0] < m[1]))
        });
        prop_assert_eq!(eer(&t, &n).unwrap(), eer(&f(&t), &f(&n)).unwrap());
        prop_assert_eq!(min_dcf_default(&t, &n).unwrap(), min_dcf_default(&f(&t), &f(&n)).unwrap());
    }

    #[test]
    fn metrics_agree_with_oracle(t in scores(), n in scores()) {
        prop_assert_eq!(eer(&t, &n).unwrap(), brute_eer(&t, &n));
        prop_assert_eq!(min_dcf_default(&t, &n).unwrap(), brute_min_dcf(&t, &n, 0.01));
    }

    #[test]
    fn plda_score_is_symmetric(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(1..6);
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let plda = Plda::new(DVector::zeros(d), &a * a.transpose(), DMatrix::identity(d, d)).unwrap();
        let u = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
        let v = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
        prop_assert_eq!(plda.score(&u, &v).unwrap().to_bits(), plda.score(&v, &u).unwrap().to_bits());
    }
}
