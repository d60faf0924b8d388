//! Utterance records, global feature normalization, the synthetic corpus
//! generator and the binary archive format.

mod archive;
mod manifest;
mod norm;
mod synth;

use std::collections::HashSet;

pub use archive::{decode_archive, encode_archive, read_archive, write_archive, ARCHIVE_MAGIC, ARCHIVE_VERSION};
pub use manifest::{read_manifest, write_manifest, CorpusManifest, ManifestEntry};
pub use norm::{compute_global_norm, NormStats};
pub use synth::{synth_generate, SynthSpec};

/// Feature dimension of the reconstruction target.
pub const FEATURE_DIM: usize = 30;
/// Position-dependent phones plus silence/noise variants.
pub const PHONE_CLASSES: usize = 166;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("utterance {id}: {detail}")]
    InvalidRecord { id: String, detail: String },
    #[error("duplicate utterance id {0}")]
    DuplicateId(String),
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
    #[error("corpus has no frames")]
    Empty,
    #[error("feature dimension {dim} has zero variance")]
    ZeroVariance { dim: usize },
    #[error("archive error at byte {offset}{}: {detail}", record.map(|r| format!(" (record {r})")).unwrap_or_default())]
    Archive { offset: usize, record: Option<usize>, detail: String },
    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One utterance: clean frames `Y`, augmented frames `Ỹ`, frame-level phone
/// labels and an optional speaker label.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    id: String,
    speaker: Option<u32>,
    feat_dim: usize,
    clean: Vec<f32>,
    aug: Vec<f32>,
    phones: Vec<u16>,
}

impl Utterance {
    pub fn new(
        id: impl Into<String>,
        speaker: Option<u32>,
        feat_dim: usize,
        clean: Vec<f32>,
        aug: Vec<f32>,
        phones: Vec<u16>,
    ) -> Result<Self, CorpusError> {
        let id = id.into();
        let bad = |detail: String| CorpusError::InvalidRecord { id: id.clone(), detail };
        if feat_dim == 0 {
            return Err(bad("feature dimension is zero".into()));
        }
        let t = phones.len();
        if t == 0 {
            return Err(bad("no frames".into()));
        }
        if clean.len() != t * feat_dim || aug.len() != t * feat_dim {
            return Err(bad(format!(
                "{t} phone labels but {} clean / {} augmented values for dimension {feat_dim}",
                clean.len(),
                aug.len()
            )));
        }
        if clean.iter().chain(&aug).any(|v| !v.is_finite()) {
            return Err(bad("non-finite feature value".into()));
        }
        Ok(Self { id, speaker, feat_dim, clean, aug, phones })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn speaker(&self) -> Option<u32> {
        self.speaker
    }

    pub fn is_labelled(&self) -> bool {
        self.speaker.is_some()
    }

    pub fn frames(&self) -> usize {
        self.phones.len()
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    /// Clean frames, row-major `T × F`.
    pub fn clean(&self) -> &[f32] {
        &self.clean
    }

    /// Augmented frames, row-major `T × F`.
    pub fn augmented(&self) -> &[f32] {
        &self.aug
    }

    pub fn phones(&self) -> &[u16] {
        &self.phones
    }

    pub fn without_label(mut self) -> Self {
        self.speaker = None;
        self
    }
}

/// A set of utterances sharing a feature dimension and phone inventory.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    feat_dim: usize,
    phone_count: usize,
    utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn new(feat_dim: usize, phone_count: usize, utterances: Vec<Utterance>) -> Result<Self, CorpusError> {
        if phone_count == 0 || phone_count > u16::MAX as usize + 1 {
            return Err(CorpusError::InvalidSpec(format!("phone count {phone_count} out of range")));
        }
        let mut seen = HashSet::new();
        for u in &utterances {
            if !seen.insert(u.id.as_str()) {
                return Err(CorpusError::DuplicateId(u.id.clone()));
            }
            if u.feat_dim != feat_dim {
                return Err(CorpusError::InvalidRecord {
                    id: u.id.clone(),
                    detail: format!("feature dimension {} differs from corpus dimension {feat_dim}", u.feat_dim),
                });
            }
            if let Some(p) = u.phones.iter().find(|&&p| p as usize >= phone_count) {
                return Err(CorpusError::InvalidRecord {
                    id: u.id.clone(),
                    detail: format!("phone {p} outside [0, {phone_count})"),
                });
            }
        }
        Ok(Self { feat_dim, phone_count, utterances })
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn phone_count(&self) -> usize {
        self.phone_count
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(Utterance::frames).sum()
    }

    /// Distinct speaker labels in ascending order.
    pub fn speakers(&self) -> Vec<u32> {
        let mut s: Vec<u32> = self.utterances.iter().filter_map(|u| u.speaker).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn manifest(&self) -> CorpusManifest {
        CorpusManifest {
            entries: self
                .utterances
                .iter()
                .map(|u| ManifestEntry { id: u.id.clone(), speaker: u.speaker, frames: u.frames() })
                .collect(),
            norm: None,
        }
    }

    /// Both channels mapped through `(x − mean) / std`.
    pub fn normalized(&self, stats: &NormStats) -> Corpus {
        let apply = |data: &[f32]| -> Vec<f32> {
            data.chunks_exact(self.feat_dim)
                .flat_map(|row| row.iter().enumerate().map(|(d, &v)| stats.apply(d, v)))
                .collect()
        };
        let utterances = self
            .utterances
            .iter()
            .map(|u| Utterance { clean: apply(&u.clean), aug: apply(&u.aug), ..u.clone() })
            .collect();
        Corpus { utterances, ..self.clone() }
    }

    /// Keeps the utterances selected by `keep`.
    pub fn filter(&self, mut keep: impl FnMut(&Utterance) -> bool) -> Corpus {
        Corpus {
            feat_dim: self.feat_dim,
            phone_count: self.phone_count,
            utterances: self.utterances.iter().filter(|u| keep(u)).cloned().collect(),
        }
    }

    /// Removes speaker labels from utterances selected by `hide`.
    pub fn hide_labels(&self, mut hide: impl FnMut(&Utterance) -> bool) -> Corpus {
        Corpus {
            feat_dim: self.feat_dim,
            phone_count: self.phone_count,
            utterances: self
                .utterances
                .iter()
                .map(|u| if hide(u) { u.clone().without_label() } else { u.clone() })
                .collect(),
        }
    }
}
