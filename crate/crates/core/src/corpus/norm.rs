use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError};

/// Per-dimension mean and population variance of the augmented frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl NormStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    #[inline]
    pub fn apply(&self, dim: usize, v: f32) -> f32 {
        ((v as f64 - self.mean[dim]) / self.var[dim].sqrt()) as f32
    }
}

/// Statistics over every augmented frame of `corpus` (two-pass, divide by N).
pub fn compute_global_norm(corpus: &Corpus) -> Result<NormStats, CorpusError> {
    let f = corpus.feat_dim();
    let n = corpus.total_frames();
    if n == 0 {
        return Err(CorpusError::Empty);
    }
    let frames = || corpus.utterances().iter().flat_map(|u| u.augmented().chunks_exact(f));
    let mut mean = vec![0.0f64; f];
    for row in frames() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += *v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0f64; f];
    for row in frames() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let c = *v as f64 - m;
            *s += c * c;
        }
    }
    var.iter_mut().for_each(|s| *s /= n as f64);
    if let Some(dim) = var.iter().position(|&v| !(v > 0.0)) {
        return Err(CorpusError::ZeroVariance { dim });
    }
    Ok(NormStats { mean, var })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Utterance;

    #[test]
    fn two_frames_population_variance() {
        let u = Utterance::new("u", None, 1, vec![0.0, 2.0], vec![0.0, 2.0], vec![0, 0]).unwrap();
        let c = Corpus::new(1, 1, vec![u]).unwrap();
        let s = compute_global_norm(&c).unwrap();
        assert_eq!(s.mean, vec![1.0]);
        assert_eq!(s.var, vec![1.0]);
    }

    #[test]
    fn constant_dimension_rejected() {
        let u = Utterance::new("u", None, 2, vec![1.0, 0.0, 1.0, 5.0], vec![1.0, 0.0, 1.0, 5.0], vec![0, 0]).unwrap();
        let c = Corpus::new(2, 1, vec![u]).unwrap();
        assert!(matches!(compute_global_norm(&c), Err(CorpusError::ZeroVariance { dim: 0 })));
    }

    #[test]
    fn empty_corpus_rejected() {
        let c = Corpus::new(2, 1, vec![]).unwrap();
        assert!(matches!(compute_global_norm(&c), Err(CorpusError::Empty)));
    }
}
