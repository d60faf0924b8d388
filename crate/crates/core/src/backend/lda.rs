use nalgebra::{DMatrix, DVector};

use super::{group_by_speaker, sorted_eigen, BackendError};

/// Linear discriminant projection with whitened within-class scatter.
#[derive(Clone, Debug, PartialEq)]
pub struct Lda {
    /// `out_dim × in_dim`.
    pub projection: DMatrix<f64>,
    /// Generalized eigenvalues of the kept directions, descending.
    pub eigenvalues: Vec<f64>,
}

impl Lda {
    pub fn out_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.projection * x
    }

    /// No between-class structure: every kept eigenvalue is negligible.
    pub fn is_degenerate(&self) -> bool {
        self.eigenvalues.first().is_none_or(|&v| v.abs() < 1e-8)
    }
}

/// Within- and between-class scatter (divided by N), and the class means.
pub fn class_scatter(x: &[DVector<f64>], labels: &[u32]) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = x[0].len();
    let n = x.len() as f64;
    let mean = x.iter().fold(DVector::zeros(d), |acc, v| acc + v) / n;
    let mut within = DMatrix::zeros(d, d);
    let mut between = DMatrix::zeros(d, d);
    for idx in group_by_speaker(labels).values() {
        let m = idx.iter().fold(DVector::zeros(d), |acc: DVector<f64>, &i| acc + &x[i]) / idx.len() as f64;
        for &i in idx {
            let c = &x[i] - &m;
            within += &c * c.transpose();
        }
        let c = &m - &mean;
        between += (&c * c.transpose()) * idx.len() as f64;
    }
    (within / n, between / n)
}

/// Top `out_dim` generalized eigendirections of (between, within) scatter.
///
/// The within scatter is regularized by `λ·I`, `λ = 1e-4 · trace / dim`,
/// so it stays invertible when there are fewer speakers than dimensions.
pub fn fit_lda(x: &[DVector<f64>], labels: &[u32], out_dim: usize) -> Result<Lda, BackendError> {
    super::check_labelled(x, labels)?;
    let d = x[0].len();
    if out_dim == 0 || out_dim > d {
        return Err(BackendError::Config(format!("LDA output dimension {out_dim} must lie in [1, {d}]")));
    }
    let (mut within, between) = class_scatter(x, labels);
    let trace = within.trace();
    if !(trace > 0.0) {
        return Err(BackendError::Singular("within-class scatter is zero".into()));
    }
    let lambda = 1e-4 * trace / d as f64;
    for i in 0..d {
        within[(i, i)] += lambda;
    }
    let chol = within
        .cholesky()
        .ok_or_else(|| BackendError::Singular("within-class scatter is not positive definite".into()))?;
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .ok_or_else(|| BackendError::Singular("within-class Cholesky factor".into()))?;
    let m = &l_inv * between * l_inv.transpose();
    let (values, vectors) = sorted_eigen(&((&m + m.transpose()) * 0.5));
    let kept = vectors.columns(0, out_dim).into_owned();
    Ok(Lda { projection: kept.transpose() * l_inv, eigenvalues: values[..out_dim].to_vec() })
}
