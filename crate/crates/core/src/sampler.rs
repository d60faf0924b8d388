//! Encode/decode segment pairs and minibatch composition.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Utterance};

/// Ablation switches: clean decode targets, phone context in the decoder,
/// identical encode/decode windows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Variant {
    pub cln: bool,
    pub ctx: bool,
    pub same: bool,
}

impl Variant {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.cln {
            parts.push("cln");
        }
        if self.ctx {
            parts.push("ctx");
        }
        if self.same {
            parts.push("same");
        }
        if parts.is_empty() {
            "plain".to_owned()
        } else {
            parts.join(",")
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConfig {
    pub min_frames: usize,
    pub max_frames: usize,
    /// Segments per δ class in one minibatch.
    pub batch_size: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self { min_frames: 200, max_frames: 400, batch_size: 150 }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SampleError {
    #[error("utterance {id} has {frames} frames, fewer than the minimum segment length {min}")]
    TooShort { id: String, frames: usize, min: usize },
    #[error("utterance {0} has no speaker label but was requested as supervised")]
    Unlabelled(String),
    #[error("no eligible {0} utterances for this batch composition")]
    EmptyPool(&'static str),
    #[error("invalid segment configuration: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub len: usize,
}

/// An encode window from the augmented channel and a decode window (clean
/// under `cln`) from the same utterance.
#[derive(Clone, Copy, Debug)]
pub struct SegmentPair<'a> {
    pub utterance: &'a Utterance,
    pub encode: Window,
    pub decode: Window,
    pub decode_clean: bool,
    /// δ: whether the speaker label takes part in the loss.
    pub supervised: bool,
}

impl<'a> SegmentPair<'a> {
    fn rows(&self, data: &'a [f32], w: Window) -> &'a [f32] {
        let f = self.utterance.feat_dim();
        &data[w.start * f..(w.start + w.len) * f]
    }

    pub fn encode_frames(&self) -> &'a [f32] {
        self.rows(self.utterance.augmented(), self.encode)
    }

    pub fn decode_frames(&self) -> &'a [f32] {
        let src = if self.decode_clean { self.utterance.clean() } else { self.utterance.augmented() };
        self.rows(src, self.decode)
    }

    pub fn decode_phones(&self) -> &'a [u16] {
        &self.utterance.phones()[self.decode.start..self.decode.start + self.decode.len]
    }

    /// Speaker label, visible only when δ = 1.
    pub fn speaker(&self) -> Option<u32> {
        if self.supervised {
            self.utterance.speaker()
        } else {
            None
        }
    }

    pub fn delta(&self) -> u8 {
        self.supervised as u8
    }
}

impl SegmentConfig {
    pub fn validate(&self) -> Result<(), SampleError> {
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(SampleError::Config("need 1 <= min_frames <= max_frames".into()));
        }
        if self.batch_size == 0 {
            return Err(SampleError::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Draws one segment pair. Segment lengths are uniform in
/// `[min_frames, min(max_frames, T)]`, offsets uniform over valid starts.
pub fn sample_pair<'a, R: Rng + ?Sized>(
    utterance: &'a Utterance,
    variant: Variant,
    cfg: &SegmentConfig,
    supervised: bool,
    rng: &mut R,
) -> Result<SegmentPair<'a>, SampleError> {
    let t = utterance.frames();
    if t < cfg.min_frames {
        return Err(SampleError::TooShort { id: utterance.id().to_owned(), frames: t, min: cfg.min_frames });
    }
    if supervised && utterance.speaker().is_none() {
        return Err(SampleError::Unlabelled(utterance.id().to_owned()));
    }
    let upper = cfg.max_frames.min(t);
    let window = |rng: &mut R| {
        let len = rng.random_range(cfg.min_frames..=upper);
        let start = rng.random_range(0..=t - len);
        Window { start, len }
    };
    let encode = window(rng);
    let decode = if variant.same { encode } else { window(rng) };
    Ok(SegmentPair { utterance, encode, decode, decode_clean: variant.cln, supervised })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Composition {
    /// `batch_size` labelled segments, δ = 1.
    Supervised,
    /// `batch_size` segments from every eligible utterance, δ = 0.
    Unsupervised,
    /// `batch_size` labelled (δ = 1) plus `batch_size` unlabelled (δ = 0).
    Semisupervised,
}

/// Utterance indices long enough to yield a segment.
#[derive(Clone, Debug)]
pub struct SamplingPools {
    pub labelled: Vec<usize>,
    pub unlabelled: Vec<usize>,
    pub all: Vec<usize>,
}

impl SamplingPools {
    pub fn new(corpus: &Corpus, cfg: &SegmentConfig) -> Self {
        Self::from_indices(corpus, cfg, 0..corpus.len())
    }

    pub fn from_indices(corpus: &Corpus, cfg: &SegmentConfig, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut pools = Self { labelled: Vec::new(), unlabelled: Vec::new(), all: Vec::new() };
        let mut skipped = 0usize;
        for i in indices {
            let u = &corpus.utterances()[i];
            if u.frames() < cfg.min_frames {
                skipped += 1;
                continue;
            }
            pools.all.push(i);
            if u.is_labelled() {
                pools.labelled.push(i);
            } else {
                pools.unlabelled.push(i);
            }
        }
        if skipped > 0 {
            warn!("skipped {skipped} utterances shorter than {} frames", cfg.min_frames);
        }
        pools
    }
}

/// One minibatch of segment pairs.
#[derive(Clone, Debug)]
pub struct TrainingBatch<'a> {
    pub pairs: Vec<SegmentPair<'a>>,
}

impl<'a> TrainingBatch<'a> {
    pub fn labelled(&self) -> Vec<SegmentPair<'a>> {
        self.pairs.iter().filter(|p| p.supervised).copied().collect()
    }

    pub fn unlabelled(&self) -> Vec<SegmentPair<'a>> {
        self.pairs.iter().filter(|p| !p.supervised).copied().collect()
    }
}

/// Draws a minibatch; utterances are picked uniformly with replacement from
/// the pool each δ class requires.
pub fn compose_batch<'a, R: Rng + ?Sized>(
    corpus: &'a Corpus,
    pools: &SamplingPools,
    composition: Composition,
    variant: Variant,
    cfg: &SegmentConfig,
    rng: &mut R,
) -> Result<TrainingBatch<'a>, SampleError> {
    let mut pairs = Vec::new();
    let mut draw = |pool: &[usize], name: &'static str, supervised: bool, rng: &mut R| {
        if pool.is_empty() {
            return Err(SampleError::EmptyPool(name));
        }
        for _ in 0..cfg.batch_size {
            let idx = pool[rng.random_range(0..pool.len())];
            pairs.push(sample_pair(&corpus.utterances()[idx], variant, cfg, supervised, rng)?);
        }
        Ok(())
    };
    match composition {
        Composition::Supervised => draw(&pools.labelled, "labelled", true, rng)?,
        Composition::Unsupervised => draw(&pools.all, "training", false, rng)?,
        Composition::Semisupervised => {
            if pools.labelled.is_empty() {
                return Err(SampleError::EmptyPool("labelled"));
            }
            if pools.unlabelled.is_empty() {
                return Err(SampleError::EmptyPool("unlabelled"));
            }
            draw(&pools.labelled, "labelled", true, rng)?;
            draw(&pools.unlabelled, "unlabelled", false, rng)?;
        }
    }
    Ok(TrainingBatch { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_generate, SynthSpec};
    use crate::rng::stream_rng;

    fn corpus(labelled_fraction: f64, aug: f64) -> Corpus {
        synth_generate(&SynthSpec {
            speakers: 4,
            utterances_per_speaker: 3,
            min_frames: 420,
            max_frames: 500,
            phone_count: 12,
            augment_noise_scale: aug,
            labelled_fraction,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn same_variant_shares_windows() {
        let c = corpus(1.0, 0.3);
        let mut rng = stream_rng(1, 0);
        let v = Variant { same: true, ..Variant::default() };
        for _ in 0..50 {
            let p = sample_pair(&c.utterances()[0], v, &SegmentConfig::default(), false, &mut rng).unwrap();
            assert_eq!(p.encode, p.decode);
        }
    }

    #[test]
    fn clean_decode_slices_clean_channel() {
        let c = corpus(1.0, 0.0);
        let mut rng = stream_rng(2, 0);
        let v = Variant { cln: true, ..Variant::default() };
        let u = &c.utterances()[1];
        let p = sample_pair(u, v, &SegmentConfig::default(), true, &mut rng).unwrap();
        let f = u.feat_dim();
        assert_eq!(p.decode_frames(), &u.clean()[p.decode.start * f..(p.decode.start + p.decode.len) * f]);
        assert_eq!(p.decode_phones().len(), p.decode.len);
    }

    #[test]
    fn short_utterances() {
        let u = Utterance::new("s", None, 1, vec![0.0; 250], vec![0.0; 250], vec![0; 250]).unwrap();
        let mut rng = stream_rng(3, 0);
        let cfg = SegmentConfig::default();
        for _ in 0..100 {
            let p = sample_pair(&u, Variant::default(), &cfg, false, &mut rng).unwrap();
            assert!((200..=250).contains(&p.encode.len));
            assert!(p.encode.start + p.encode.len <= 250);
        }
        let tiny = Utterance::new("t", None, 1, vec![0.0; 199], vec![0.0; 199], vec![0; 199]).unwrap();
        assert!(matches!(
            sample_pair(&tiny, Variant::default(), &cfg, false, &mut rng),
            Err(SampleError::TooShort { .. })
        ));
    }

    #[test]
    fn semisupervised_requires_labels() {
        let c = corpus(0.0, 0.3);
        let cfg = SegmentConfig::default();
        let pools = SamplingPools::new(&c, &cfg);
        let mut rng = stream_rng(4, 0);
        let err = compose_batch(&c, &pools, Composition::Semisupervised, Variant::default(), &cfg, &mut rng);
        assert!(matches!(err, Err(SampleError::EmptyPool("labelled"))));
    }

    #[test]
    fn supervised_batch_is_all_labelled() {
        let c = corpus(0.5, 0.3);
        let cfg = SegmentConfig::default();
        let pools = SamplingPools::new(&c, &cfg);
        let mut rng = stream_rng(5, 0);
        let b = compose_batch(&c, &pools, Composition::Supervised, Variant::default(), &cfg, &mut rng).unwrap();
        assert_eq!(b.pairs.len(), 150);
        assert!(b.pairs.iter().all(|p| p.delta() == 1 && p.speaker().is_some()));

        let b = compose_batch(&c, &pools, Composition::Semisupervised, Variant::default(), &cfg, &mut rng).unwrap();
        assert_eq!(b.labelled().len(), 150);
        assert_eq!(b.unlabelled().len(), 150);
        assert!(b.unlabelled().iter().all(|p| p.utterance.speaker().is_none()));
    }

    #[test]
    fn unsupervised_hides_labels() {
        let c = corpus(1.0, 0.3);
        let cfg = SegmentConfig::default();
        let pools = SamplingPools::new(&c, &cfg);
        let mut rng = stream_rng(6, 0);
        let b = compose_batch(&c, &pools, Composition::Unsupervised, Variant::default(), &cfg, &mut rng).unwrap();
        assert_eq!(b.pairs.len(), 150);
        assert!(b.pairs.iter().all(|p| p.delta() == 0 && p.speaker().is_none()));
    }

    #[test]
    fn fixed_seed_fixed_stream() {
        let c = corpus(1.0, 0.3);
        let cfg = SegmentConfig::default();
        let pools = SamplingPools::new(&c, &cfg);
        let windows = |seed| {
            let mut rng = stream_rng(seed, 7);
            let b = compose_batch(&c, &pools, Composition::Supervised, Variant::default(), &cfg, &mut rng).unwrap();
            b.pairs.iter().map(|p| (p.utterance.id().to_owned(), p.encode, p.decode)).collect::<Vec<_>>()
        };
        assert_eq!(windows(9), windows(9));
        assert_ne!(windows(9), windows(10));
    }
}
