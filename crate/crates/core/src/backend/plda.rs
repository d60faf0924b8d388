use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::{group_by_speaker, sorted_eigen, BackendError};

/// Two-covariance PLDA: `x = μ + y + ε`, `y ~ N(0, B)`, `ε ~ N(0, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Plda {
    pub mean: DVector<f64>,
    pub between: DMatrix<f64>,
    pub within: DMatrix<f64>,
    /// `T` with `T W Tᵀ = I` and `T B Tᵀ = diag(ψ)`.
    transform: DMatrix<f64>,
    psi: DVector<f64>,
}

impl Plda {
    pub fn new(mean: DVector<f64>, between: DMatrix<f64>, within: DMatrix<f64>) -> Result<Self, BackendError> {
        let d = mean.len();
        if between.shape() != (d, d) || within.shape() != (d, d) {
            return Err(BackendError::Config("PLDA covariance shapes do not match the mean".into()));
        }
        let chol = within
            .clone()
            .cholesky()
            .ok_or_else(|| BackendError::Singular("PLDA within-class covariance is not positive definite".into()))?;
        let l_inv = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .ok_or_else(|| BackendError::Singular("PLDA within-class Cholesky factor".into()))?;
        let m = &l_inv * &between * l_inv.transpose();
        let (values, vectors) = sorted_eigen(&((&m + m.transpose()) * 0.5));
        if values.iter().any(|v| !v.is_finite() || *v < -1e-9) {
            return Err(BackendError::Singular("PLDA between-class covariance is not positive semi-definite".into()));
        }
        let psi = DVector::from_iterator(d, values.into_iter().map(|v| v.max(0.0)));
        let transform = vectors.transpose() * l_inv;
        Ok(Self { mean, between, within, transform, psi })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Per-dimension between-class variances in the diagonalized space.
    pub fn psi(&self) -> &DVector<f64> {
        &self.psi
    }

    /// `log p(a, b | same) − log p(a, b | different)`.
    pub fn score(&self, enrol: &DVector<f64>, test: &DVector<f64>) -> Result<f64, BackendError> {
        if enrol.len() != self.dim() || test.len() != self.dim() {
            return Err(BackendError::Dimension { expected: self.dim(), found: enrol.len().max(test.len()) });
        }
        let u = &self.transform * (enrol - &self.mean);
        let v = &self.transform * (test - &self.mean);
        let mut llr = 0.0;
        for k in 0..self.dim() {
            let psi = self.psi[k];
            let (u, v) = (u[k], v[k]);
            let sq = u * u + v * v;
            let cross = u * v;
            let two = 2.0 * psi + 1.0;
            llr += -0.5 * two.ln() - 0.5 * ((psi + 1.0) * sq - 2.0 * psi * cross) / two
                + (psi + 1.0).ln()
                + 0.5 * sq / (psi + 1.0);
        }
        if !llr.is_finite() {
            return Err(BackendError::NonFinite(llr));
        }
        Ok(llr)
    }
}

/// Result of [`fit_plda`].
#[derive(Clone, Debug)]
pub struct PldaFit {
    pub plda: Plda,
    /// Total-data log-likelihood before the first and after every iteration.
    pub log_likelihoods: Vec<f64>,
}

struct SpeakerStats {
    n: f64,
    mean: DVector<f64>,
    scatter: DMatrix<f64>,
}

fn log_det_chol(m: &DMatrix<f64>) -> Option<(f64, DMatrix<f64>)> {
    let chol = m.clone().cholesky()?;
    let ld = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Some((ld, chol.inverse()))
}

fn log_likelihood(stats: &[SpeakerStats], mu: &DVector<f64>, b: &DMatrix<f64>, w: &DMatrix<f64>) -> Option<f64> {
    let d = mu.len() as f64;
    let (ld_w, w_inv) = log_det_chol(w)?;
    let mut total = 0.0;
    for s in stats {
        let (ld_c, c_inv) = log_det_chol(&(b + w / s.n))?;
        let c = &s.mean - mu;
        let quad = (c.transpose() * &c_inv * &c)[(0, 0)];
        total += -0.5 * (d * (2.0 * PI).ln() + ld_c + quad);
        total += -0.5 * (s.n - 1.0) * d * (2.0 * PI).ln() - 0.5 * (s.n - 1.0) * ld_w - 0.5 * d * s.n.ln()
            - 0.5 * (&w_inv * &s.scatter).trace();
    }
    Some(total)
}

/// EM for the two-covariance model from per-speaker means and scatters.
/// The mean is fixed at the global data mean.
pub fn fit_plda(x: &[DVector<f64>], labels: &[u32], iterations: usize) -> Result<PldaFit, BackendError> {
    super::check_labelled(x, labels)?;
    let d = x[0].len();
    let groups = group_by_speaker(labels);
    let total_n = x.len() as f64;
    let mu = x.iter().fold(DVector::zeros(d), |acc, v| acc + v) / total_n;
    let stats: Vec<SpeakerStats> = groups
        .values()
        .map(|idx| {
            let n = idx.len() as f64;
            let mean = idx.iter().fold(DVector::zeros(d), |acc: DVector<f64>, &i| acc + &x[i]) / n;
            let mut scatter = DMatrix::zeros(d, d);
            for &i in idx {
                let c = &x[i] - &mean;
                scatter += &c * c.transpose();
            }
            SpeakerStats { n, mean, scatter }
        })
        .collect();
    let s_count = stats.len() as f64;
    let within_scatter = stats.iter().fold(DMatrix::zeros(d, d), |acc, s| acc + &s.scatter);

    let mut w = &within_scatter / total_n;
    let mut b = stats.iter().fold(DMatrix::zeros(d, d), |acc, s| {
        let c = &s.mean - &mu;
        acc + &c * c.transpose()
    }) / s_count;
    let collapse = |iteration: usize| BackendError::Collapse { iteration };
    let mut lls = vec![log_likelihood(&stats, &mu, &b, &w).ok_or_else(|| collapse(0))?];
    for it in 1..=iterations {
        let mut b_acc = DMatrix::zeros(d, d);
        let mut w_acc = within_scatter.clone();
        for s in &stats {
            // Posterior of the speaker variable, written without B⁻¹ so a
            // vanishing between-class covariance stays well defined.
            let (_, k_inv) = log_det_chol(&(&b + &w / s.n)).ok_or_else(|| collapse(it))?;
            let gain = &b * &k_inv;
            let c = &s.mean - &mu;
            let m = &gain * &c;
            let cov = &b - &gain * &b;
            let cov = (&cov + cov.transpose()) * 0.5;
            b_acc += &cov + &m * m.transpose();
            let r = &c - &m;
            w_acc += (&r * r.transpose() + &cov) * s.n;
        }
        b = b_acc / s_count;
        w = w_acc / total_n;
        b = (&b + b.transpose()) * 0.5;
        w = (&w + w.transpose()) * 0.5;
        if b.iter().chain(w.iter()).any(|v| !v.is_finite()) {
            return Err(collapse(it));
        }
        lls.push(log_likelihood(&stats, &mu, &b, &w).ok_or_else(|| collapse(it))?);
    }
    let plda = Plda::new(mu, b, w).map_err(|_| collapse(iterations))?;
    Ok(PldaFit { plda, log_likelihoods: lls })
}

