//! Brute-force and closed-form references for metrics, PLDA and pooling.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use selfspk::backend::Plda;
use selfspk::metrics::{eer, min_dcf};
use selfspk::numerics::{Segments, Tape, Tensor};

/// Miss and false-alarm counts at θ = every distinct score and θ = +∞,
/// counted directly (accept when score ≥ θ).
pub fn brute_points(target: &[f64], nontarget: &[f64]) -> Vec<(u64, u64)> {
    let mut thresholds: Vec<f64> = target.iter().chain(nontarget).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    thresholds
        .iter()
        .map(|&th| {
            let misses = target.iter().filter(|&&s| s < th).count() as u64;
            let fas = nontarget.iter().filter(|&&s| s >= th).count() as u64;
            (misses, fas)
        })
        .collect()
}

/// Lowest point where any chord between two operating points meets the
/// diagonal. Chords fill the convex hull of the ROC, so this is the hull EER.
pub fn brute_eer(target: &[f64], nontarget: &[f64]) -> f64 {
    let (nt, nn) = (target.len() as i128, nontarget.len() as i128);
    let pts: Vec<(i128, i128)> =
        brute_points(target, nontarget).iter().map(|&(a, b)| (a as i128 * nn, b as i128 * nt)).collect();
    // Best crossing as a fraction of nt·nn.
    let mut best: Option<(i128, i128)> = None;
    for i in 0..pts.len() {
        for j in i..pts.len() {
            let (x1, y1) = pts[i];
            let (x2, y2) = pts[j];
            let (d1, d2) = (x1 - y1, x2 - y2);
            let candidate = if d1 == 0 {
                (x1, 1)
            } else if d2 == 0 {
                (x2, 1)
            } else if (d1 > 0) != (d2 > 0) {
                let den = d1 - d2;
                let num = x1 * den + d1 * (x2 - x1);
                if den < 0 { (-num, -den) } else { (num, den) }
            } else {
                continue;
            };
            best = match best {
                Some((n, d)) if n * candidate.1 <= candidate.0 * d => Some((n, d)),
                _ => Some(candidate),
            };
        }
    }
    let (num, den) = best.expect("the all-accept and reject-all chord crosses the diagonal");
    let (num, den) = reduce(num * 100, den * nt * nn);
    num as f64 / den as f64
}

fn reduce(a: i128, b: i128) -> (i128, i128) {
    let (mut x, mut y) = (a.abs(), b.abs());
    while y != 0 {
        (x, y) = (y, x % y);
    }
    if x == 0 { (a, b) } else { (a / x, b / x) }
}

pub fn brute_min_dcf(target: &[f64], nontarget: &[f64], p_tar: f64) -> f64 {
    let floor = p_tar.min(1.0 - p_tar);
    brute_points(target, nontarget)
        .iter()
        .map(|&(a, b)| {
            let p_miss = a as f64 / target.len() as f64;
            let p_fa = b as f64 / nontarget.len() as f64;
            (p_tar * p_miss + (1.0 - p_tar) * p_fa) / floor
        })
        .fold(f64::INFINITY, f64::min)
}

/// Random score sets with heavy ties, moderate overlap and up to 1000 scores.
pub fn random_trials(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let nt = rng.random_range(1..=200);
    let nn = rng.random_range(1..=800);
    let quantize = rng.random_bool(0.5);
    let shift: f64 = rng.random_range(0.0..3.0);
    let draw = |rng: &mut ChaCha8Rng, mu: f64| {
        let v: f64 = mu + rng.sample::<f64, _>(StandardNormal);
        if quantize { (v * 2.0).round() / 2.0 } else { v }
    };
    let target = (0..nt).map(|_| draw(rng, shift)).collect();
    let nontarget = (0..nn).map(|_| draw(rng, 0.0)).collect();
    (target, nontarget)
}

/// Number of random sets on which EER and minDCF both equal the oracle
/// bit for bit, or the first mismatch.
pub fn metrics_against_oracle(cases: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let (t, n) = random_trials(&mut rng);
        let (e, o) = (eer(&t, &n).unwrap(), brute_eer(&t, &n));
        if e.to_bits() != o.to_bits() {
            return Err(format!("case {case}: EER {e} vs oracle {o}"));
        }
        let (d, o) = (min_dcf(&t, &n, 0.01, 1.0, 1.0).unwrap(), brute_min_dcf(&t, &n, 0.01));
        if d.to_bits() != o.to_bits() {
            return Err(format!("case {case}: minDCF {d} vs oracle {o}"));
        }
    }
    Ok(cases)
}

fn log_normal(x: f64, var: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * x * x / var
}

/// Two-covariance LLR in one dimension from the joint bivariate Gaussian.
pub fn plda_1d_llr(mu: f64, b: f64, w: f64, u: f64, v: f64) -> f64 {
    let (x, y) = (u - mu, v - mu);
    let s = b + w;
    let det = s * s - b * b;
    let quad = (s * x * x - 2.0 * b * x * y + s * y * y) / det;
    let same = -(2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln() - 0.5 * quad;
    same - log_normal(x, s) - log_normal(y, s)
}

/// Two-covariance LLR for any dimension from dense Gaussian densities.
pub fn plda_dense_llr(mu: &DVector<f64>, b: &DMatrix<f64>, w: &DMatrix<f64>, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
    let d = mu.len();
    let s = b + w;
    let mut joint = DMatrix::zeros(2 * d, 2 * d);
    joint.view_mut((0, 0), (d, d)).copy_from(&s);
    joint.view_mut((d, d), (d, d)).copy_from(&s);
    joint.view_mut((0, d), (d, d)).copy_from(b);
    joint.view_mut((d, 0), (d, d)).copy_from(b);
    let z = DVector::from_iterator(2 * d, (u - mu).iter().chain((v - mu).iter()).copied());
    let log_gauss = |cov: &DMatrix<f64>, x: &DVector<f64>| {
        let inv = cov.clone().try_inverse().unwrap();
        let quad = (x.transpose() * inv * x)[0];
        -0.5 * (x.len() as f64 * (2.0 * std::f64::consts::PI).ln() + cov.determinant().ln() + quad)
    };
    log_gauss(&joint, &z) - log_gauss(&s, &(u - mu)) - log_gauss(&s, &(v - mu))
}

/// Largest |score − closed form| over random 1-D models and pairs.
pub fn plda_1d_max_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let mu: f64 = rng.random_range(-2.0..2.0);
        let b: f64 = rng.random_range(0.0..5.0);
        let w: f64 = rng.random_range(0.1..3.0);
        let plda = Plda::new(DVector::from_element(1, mu), DMatrix::from_element(1, 1, b), DMatrix::from_element(1, 1, w))
            .unwrap();
        for _ in 0..10 {
            let u: f64 = rng.random_range(-4.0..4.0);
            let v: f64 = rng.random_range(-4.0..4.0);
            let got = plda.score(&DVector::from_element(1, u), &DVector::from_element(1, v)).unwrap();
            worst = worst.max((got - plda_1d_llr(mu, b, w, u, v)).abs());
        }
    }
    worst
}

fn two_pass(x: &[f64], rows: std::ops::Range<usize>, d: usize, col: usize, eps: f64) -> (f64, f64) {
    let n = rows.len() as f64;
    let mean = rows.clone().map(|r| x[r * d + col]).sum::<f64>() / n;
    let var = rows.map(|r| (x[r * d + col] - mean).powi(2)).sum::<f64>() / n;
    (mean, (var + eps).sqrt())
}

/// Largest relative deviation of f32 statistics pooling from a two-pass
/// f64 mean and standard deviation.
pub fn pooling_max_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lengths = [1usize, 7, 200, 33, 400];
    let d = 5;
    let total: usize = lengths.iter().sum();
    let x64: Vec<f64> = (0..total * d)
        .map(|i| 3.0 * (i % d) as f64 - 5.0 + rng.sample::<f64, _>(StandardNormal) * (1 + i % 3) as f64)
        .collect();
    let x32: Vec<f32> = x64.iter().map(|&v| v as f32).collect();
    let x_rounded: Vec<f64> = x32.iter().map(|&v| v as f64).collect();
    let segs = Arc::new(Segments::from_lengths(&lengths).unwrap());
    let mut tape: Tape<f32> = Tape::new();
    let xv = tape.var(Tensor::new(vec![total, d], x32).unwrap());
    let pooled = tape.stats_pool(xv, &segs, 1e-10).unwrap();
    let out = tape.value(pooled);
    let mut worst: f64 = 0.0;
    for s in 0..lengths.len() {
        for c in 0..d {
            let (mean, std) = two_pass(&x_rounded, segs.range(s), d, c, 1e-10);
            let row = out.row(s);
            worst = worst.max((row[c] as f64 - mean).abs() / mean.abs().max(1.0));
            worst = worst.max((row[d + c] as f64 - std).abs() / std.max(1.0));
        }
    }
    worst
}
