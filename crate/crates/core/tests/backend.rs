use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use selfspk::backend::{fit_lda, fit_plda, length_norm, Backend, BackendConfig, BackendError};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `speakers × per` draws from a two-covariance model with diagonal
/// between and within variances.
fn two_cov(rng: &mut ChaCha8Rng, speakers: usize, per: usize, between: &[f64], within: &[f64]) -> (Vec<DVector<f64>>, Vec<u32>) {
    let d = between.len();
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for s in 0..speakers {
        let y: Vec<f64> = between.iter().map(|b| b.sqrt() * normal(rng)).collect();
        for _ in 0..per {
            x.push(DVector::from_fn(d, |i, _| y[i] + within[i].sqrt() * normal(rng)));
            labels.push(s as u32);
        }
    }
    (x, labels)
}

#[test]
fn lda_finds_separating_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for s in 0..2u32 {
        for _ in 0..200 {
            let centre = if s == 0 { -3.0 } else { 3.0 };
            x.push(DVector::from_vec(vec![centre + normal(&mut rng), normal(&mut rng)]));
            labels.push(s);
        }
    }
    let lda = fit_lda(&x, &labels, 1).unwrap();
    let dir = lda.projection.row(0).transpose();
    let cosine = dir[0].abs() / dir.norm();
    assert!(cosine > 0.99, "|cos| = {cosine}");
}

#[test]
fn lda_whitens_within_class_scatter() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (x, labels) = two_cov(&mut rng, 40, 8, &[4.0, 1.0, 0.5], &[1.0, 2.0, 0.3]);
    let lda = fit_lda(&x, &labels, 3).unwrap();
    let projected: Vec<_> = x.iter().map(|v| lda.apply(v)).collect();
    let (within, _) = selfspk::backend::class_scatter(&projected, &labels);
    assert!((within - DMatrix::identity(3, 3)).abs().max() < 1e-3);
}

#[test]
fn lda_on_equal_means_is_degenerate() {
    // Two speakers sharing exactly the same samples: no between-class scatter.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base: Vec<DVector<f64>> = (0..10).map(|_| DVector::from_fn(2, |_, _| normal(&mut rng))).collect();
    let x: Vec<_> = base.iter().chain(&base).cloned().collect();
    let labels: Vec<u32> = (0..20).map(|i| (i / 10) as u32).collect();
    let lda = fit_lda(&x, &labels, 2).unwrap();
    assert!(lda.is_degenerate());
    assert_eq!(lda.out_dim(), 2);
}

#[test]
fn lda_projection_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (x, labels) = two_cov(&mut rng, 10, 5, &[2.0, 1.0, 0.1, 3.0], &[1.0; 4]);
    let lda = fit_lda(&x, &labels, 2).unwrap();
    let (a, b) = (&x[0], &x[7]);
    let sum = lda.apply(&(a * 2.0 - b * 0.5));
    let parts = lda.apply(a) * 2.0 - lda.apply(b) * 0.5;
    assert!((sum - parts).abs().max() < 1e-12);
}

#[test]
fn lda_rejects_bad_inputs() {
    let x = vec![DVector::from_vec(vec![1.0, 2.0]); 3];
    assert!(matches!(fit_lda(&x, &[0, 0, 1], 1), Err(BackendError::TooFewSpeakers(_))));
    let x = vec![DVector::from_vec(vec![1.0, 2.0]); 4];
    assert!(matches!(fit_lda(&x, &[0, 0, 1, 1], 3), Err(BackendError::Config(_))));
}

#[test]
fn length_norm_examples() {
    let x = DVector::from_vec(vec![1.0, -1.0, 1.0, 1.0]);
    assert_eq!(length_norm(&x).unwrap(), x);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for d in 1..20 {
        let v = DVector::from_fn(d, |_, _| 10.0 * normal(&mut rng));
        let n = length_norm(&v).unwrap();
        assert!((n.norm_squared() - d as f64).abs() < 1e-6);
        assert!((n.dot(&v) / (n.norm() * v.norm()) - 1.0).abs() < 1e-12);
    }
    assert!(matches!(length_norm(&DVector::zeros(3)), Err(BackendError::ZeroVector)));
}

#[test]
fn plda_recovers_one_dimensional_variances() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (x, labels) = two_cov(&mut rng, 500, 10, &[2.0], &[1.0]);
    let fit = fit_plda(&x, &labels, 20).unwrap();
    let b = fit.plda.between[(0, 0)];
    let w = fit.plda.within[(0, 0)];
    assert!((b - 2.0).abs() / 2.0 < 0.15, "between {b}");
    assert!((w - 1.0).abs() < 0.15, "within {w}");
}

#[test]
fn em_likelihood_never_decreases() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (x, labels) = two_cov(&mut rng, 60, 6, &[2.0, 0.5, 0.0], &[1.0, 0.7, 1.3]);
    let fit = fit_plda(&x, &labels, 20).unwrap();
    assert_eq!(fit.log_likelihoods.len(), 21);
    for pair in fit.log_likelihoods.windows(2) {
        assert!(pair[1] >= pair[0] - 1e-8, "{} then {}", pair[0], pair[1]);
    }
}

#[test]
fn no_speaker_information_gives_flat_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (x, labels) = two_cov(&mut rng, 300, 10, &[0.0], &[1.0]);
    let fit = fit_plda(&x, &labels, 50).unwrap();
    let b = fit.plda.between[(0, 0)];
    assert!(b < 0.02, "between {b}");
    let scores: Vec<f64> = (0..50)
        .map(|i| fit.plda.score(&x[i], &x[(i * 7 + 13) % x.len()]).unwrap())
        .collect();
    let spread = scores.iter().cloned().fold(f64::MIN, f64::max) - scores.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread < 0.1, "score spread {spread}");

    let exact = selfspk::backend::Plda::new(DVector::zeros(2), DMatrix::zeros(2, 2), DMatrix::identity(2, 2)).unwrap();
    let s1 = exact.score(&DVector::from_vec(vec![1.0, 2.0]), &DVector::from_vec(vec![-3.0, 0.5])).unwrap();
    let s2 = exact.score(&DVector::from_vec(vec![0.0, 0.0]), &DVector::from_vec(vec![4.0, 4.0])).unwrap();
    assert_eq!(s1, 0.0);
    assert_eq!(s2, 0.0);
}

#[test]
fn pipeline_order_changes_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let shift = DVector::from_vec(vec![3.0, -2.0, 1.0, 5.0]);
    let (x, labels) = two_cov(&mut rng, 30, 6, &[2.0, 1.0, 0.5, 0.2], &[1.0, 0.5, 2.0, 1.0]);
    let x: Vec<_> = x.into_iter().map(|v| v + &shift).collect();
    let cfg = BackendConfig { lda_dim: 3, plda_iterations: 10 };
    let (backend, _) = Backend::fit(&x, &labels, &cfg).unwrap();
    let pinned = backend.score(&x[0], &x[40]).unwrap();

    // Length-normalizing before centering and LDA gives a different score.
    let reordered: Vec<_> = x.iter().map(|v| length_norm(v).unwrap()).collect();
    let (other, _) = Backend::fit(&reordered, &labels, &cfg).unwrap();
    let swapped = other.score(&reordered[0], &reordered[40]).unwrap();
    assert!((pinned - swapped).abs() > 1e-6);

    let manual = backend.plda.score(
        &length_norm(&backend.lda.apply(&(&x[0] - &backend.mean))).unwrap(),
        &length_norm(&backend.lda.apply(&(&x[40] - &backend.mean))).unwrap(),
    );
    assert_eq!(manual.unwrap(), pinned);
}
