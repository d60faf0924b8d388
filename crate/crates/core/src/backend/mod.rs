//! Verification backend: centering, LDA, length normalization and PLDA.

mod files;
mod lda;
mod plda;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use files::{
    decode_backend, encode_backend, read_backend, read_embeddings, read_scores, read_trials, write_backend,
    write_embeddings, write_scores, EmbeddingTable, ScoredTrial, Trial, TrialKey,
};
pub use lda::{class_scatter, fit_lda, Lda};
pub use plda::{fit_plda, Plda, PldaFit};

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("need at least 2 speakers with at least 2 embeddings each: {0}")]
    TooFewSpeakers(String),
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("PLDA covariance collapsed at EM iteration {iteration}")]
    Collapse { iteration: usize },
    #[error("vector has dimension {found}, expected {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("cannot length-normalize a zero vector")]
    ZeroVector,
    #[error("non-finite score {0}")]
    NonFinite(f64),
    #[error("{path} line {line}: {detail}")]
    Parse { path: String, line: usize, detail: String },
    #[error("backend file byte {offset}: {detail}")]
    Format { offset: usize, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub lda_dim: usize,
    pub plda_iterations: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self { lda_dim: 128, plda_iterations: 10 }
    }
}

pub(crate) fn group_by_speaker(labels: &[u32]) -> BTreeMap<u32, Vec<usize>> {
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    groups
}

pub(crate) fn check_labelled(x: &[DVector<f64>], labels: &[u32]) -> Result<(), BackendError> {
    if x.len() != labels.len() {
        return Err(BackendError::Config(format!("{} vectors but {} labels", x.len(), labels.len())));
    }
    let groups = group_by_speaker(labels);
    let usable = groups.values().filter(|g| g.len() >= 2).count();
    if groups.len() < 2 || usable < groups.len() {
        return Err(BackendError::TooFewSpeakers(format!(
            "{} speakers, {} with two or more embeddings",
            groups.len(),
            usable
        )));
    }
    let d = x[0].len();
    if let Some(v) = x.iter().find(|v| v.len() != d) {
        return Err(BackendError::Dimension { expected: d, found: v.len() });
    }
    if x.iter().any(|v| v.iter().any(|e| !e.is_finite())) {
        return Err(BackendError::Config("non-finite embedding value".into()));
    }
    Ok(())
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues descending.
pub(crate) fn sorted_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(m.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Scales `x` to squared norm `dim`.
pub fn length_norm(x: &DVector<f64>) -> Result<DVector<f64>, BackendError> {
    let norm = x.norm();
    if !(norm > 0.0) {
        return Err(BackendError::ZeroVector);
    }
    Ok(x * ((x.len() as f64).sqrt() / norm))
}

/// Fitted backend: `x ↦ length_norm(P (x − m))`, scored by PLDA.
#[derive(Clone, Debug, PartialEq)]
pub struct Backend {
    pub mean: DVector<f64>,
    pub lda: Lda,
    pub plda: Plda,
}

impl Backend {
    pub fn fit(x: &[DVector<f64>], labels: &[u32], cfg: &BackendConfig) -> Result<(Self, PldaFit), BackendError> {
        check_labelled(x, labels)?;
        let d = x[0].len();
        let mean = x.iter().fold(DVector::zeros(d), |acc, v| acc + v) / x.len() as f64;
        let centered: Vec<DVector<f64>> = x.iter().map(|v| v - &mean).collect();
        let lda = fit_lda(&centered, labels, cfg.lda_dim.min(d))?;
        if lda.is_degenerate() {
            log::warn!("LDA found no between-speaker structure");
        }
        let projected = centered.iter().map(|v| length_norm(&lda.apply(v))).collect::<Result<Vec<_>, _>>()?;
        let fit = fit_plda(&projected, labels, cfg.plda_iterations)?;
        Ok((Self { mean, lda, plda: fit.plda.clone() }, fit))
    }

    pub fn transform(&self, x: &DVector<f64>) -> Result<DVector<f64>, BackendError> {
        if x.len() != self.mean.len() {
            return Err(BackendError::Dimension { expected: self.mean.len(), found: x.len() });
        }
        length_norm(&self.lda.apply(&(x - &self.mean)))
    }

    pub fn score(&self, enrol: &DVector<f64>, test: &DVector<f64>) -> Result<f64, BackendError> {
        self.plda.score(&self.transform(enrol)?, &self.transform(test)?)
    }
}
