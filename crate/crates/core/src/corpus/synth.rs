//! Synthetic corpus with latent speaker factors.
//!
//! Every speaker owns a latent vector `v_s`; every phone owns a base mean
//! `μ_p` and a projection `A_p`. A frame carrying phone `p` is
//! `μ_p + A_p·v_s + noise`, so speaker identity only reaches the features
//! through phone-dependent offsets. With `context_scale > 0` each frame also
//! receives a weighted contribution `ν_q + C_q·v_s` from the phones `q` up to
//! three frames away.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, Utterance, FEATURE_DIM, PHONE_CLASSES};
use crate::rng::stream_rng;

const CONTEXT_OFFSETS: [i64; 6] = [-3, -2, -1, 1, 2, 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub speakers: usize,
    /// Global index of the first generated speaker. Corpora with the same
    /// seed share phone models, so disjoint index ranges give disjoint
    /// speakers of one population.
    pub first_speaker: u32,
    pub utterances_per_speaker: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub feat_dim: usize,
    pub phone_count: usize,
    pub speaker_dim: usize,
    pub phone_mean_scale: f64,
    pub speaker_offset_scale: f64,
    pub noise_scale: f64,
    pub augment_noise_scale: f64,
    /// Mean length in frames of a run of identical phone labels.
    pub mean_run_length: f64,
    pub context_scale: f64,
    /// Share of speakers (taken in index order) whose utterances keep labels.
    pub labelled_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            speakers: 64,
            first_speaker: 0,
            utterances_per_speaker: 20,
            min_frames: 400,
            max_frames: 600,
            feat_dim: FEATURE_DIM,
            phone_count: PHONE_CLASSES,
            speaker_dim: 8,
            phone_mean_scale: 1.0,
            speaker_offset_scale: 1.0,
            noise_scale: 0.3,
            augment_noise_scale: 0.3,
            mean_run_length: 6.0,
            context_scale: 0.0,
            labelled_fraction: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidSpec(m.to_owned()));
        if self.speakers == 0 || self.utterances_per_speaker == 0 {
            return bad("speaker and utterance counts must be at least 1");
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad("frame range must satisfy 1 <= min_frames <= max_frames");
        }
        if self.feat_dim == 0 || self.speaker_dim == 0 {
            return bad("feature and speaker dimensions must be at least 1");
        }
        if self.phone_count == 0 || self.phone_count > u16::MAX as usize + 1 {
            return bad("phone count must be in [1, 65536]");
        }
        let scales = [
            self.phone_mean_scale,
            self.speaker_offset_scale,
            self.noise_scale,
            self.augment_noise_scale,
            self.context_scale,
        ];
        if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("scales must be finite and non-negative");
        }
        if !(self.mean_run_length >= 1.0) {
            return bad("mean run length must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.labelled_fraction) {
            return bad("labelled fraction must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn labelled_speakers(&self) -> usize {
        (self.labelled_fraction * self.speakers as f64).round() as usize
    }
}

struct PhoneModel {
    means: Vec<f64>,
    proj: Vec<f64>,
    ctx_means: Vec<f64>,
    ctx_proj: Vec<f64>,
}

impl PhoneModel {
    fn new(spec: &SynthSpec) -> Self {
        let mut rng = stream_rng(spec.seed, 0);
        let (p, f, k) = (spec.phone_count, spec.feat_dim, spec.speaker_dim);
        let proj_scale = spec.speaker_offset_scale / (k as f64).sqrt();
        let mut normal = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let means = normal(p * f, spec.phone_mean_scale);
        let proj = normal(p * f * k, proj_scale);
        let ctx_means = normal(p * f, spec.phone_mean_scale);
        let ctx_proj = normal(p * f * k, proj_scale);
        Self { means, proj, ctx_means, ctx_proj }
    }
}

fn speaker_stream(global: u32) -> u64 {
    (global as u64 + 1) << 20
}

/// Generates the corpus described by `spec`. Same spec, same bytes.
pub fn synth_generate(spec: &SynthSpec) -> Result<Corpus, CorpusError> {
    spec.validate()?;
    let model = PhoneModel::new(spec);
    let (f, k) = (spec.feat_dim, spec.speaker_dim);
    let labelled = spec.labelled_speakers();
    let weight_norm: f64 = CONTEXT_OFFSETS.iter().map(|o| 1.0 / o.unsigned_abs() as f64).sum();
    let run_dist = Geometric::new(1.0 / spec.mean_run_length).expect("validated run length");

    let mut utterances = Vec::with_capacity(spec.speakers * spec.utterances_per_speaker);
    for s in 0..spec.speakers {
        let global = spec.first_speaker + s as u32;
        let mut srng = stream_rng(spec.seed, speaker_stream(global));
        let latent: Vec<f64> = (0..k).map(|_| srng.sample(StandardNormal)).collect();
        // A_p·v_s and C_p·v_s for every phone, F values each
        let offsets = project(&model.proj, &latent, spec.phone_count, f);
        let ctx_offsets = project(&model.ctx_proj, &latent, spec.phone_count, f);
        let label = (s < labelled).then_some(global);

        for u in 0..spec.utterances_per_speaker {
            let mut rng = stream_rng(spec.seed, speaker_stream(global) | (u as u64 + 1));
            let t = rng.random_range(spec.min_frames..=spec.max_frames);
            let phones = phone_runs(&mut rng, t, spec.phone_count, &run_dist);
            let mut clean = Vec::with_capacity(t * f);
            for (frame, &ph) in phones.iter().enumerate() {
                let ph = ph as usize;
                for d in 0..f {
                    let mut v = model.means[ph * f + d] + offsets[ph * f + d];
                    if spec.context_scale > 0.0 {
                        let mut ctx = 0.0;
                        for &o in &CONTEXT_OFFSETS {
                            let nb = (frame as i64 + o).clamp(0, t as i64 - 1) as usize;
                            let q = phones[nb] as usize;
                            ctx += (model.ctx_means[q * f + d] + ctx_offsets[q * f + d]) / o.unsigned_abs() as f64;
                        }
                        v += spec.context_scale * ctx / weight_norm;
                    }
                    if spec.noise_scale > 0.0 {
                        v += spec.noise_scale * rng.sample::<f64, _>(StandardNormal);
                    }
                    clean.push(v as f32);
                }
            }
            let aug = if spec.augment_noise_scale > 0.0 {
                clean
                    .iter()
                    .map(|&c| (c as f64 + spec.augment_noise_scale * rng.sample::<f64, _>(StandardNormal)) as f32)
                    .collect()
            } else {
                clean.clone()
            };
            let id = format!("spk{global:05}-utt{u:04}");
            utterances.push(Utterance::new(id, label, f, clean, aug, phones)?);
        }
    }
    Corpus::new(f, spec.phone_count, utterances)
}

fn project(proj: &[f64], latent: &[f64], phones: usize, f: usize) -> Vec<f64> {
    let k = latent.len();
    (0..phones * f)
        .map(|row| proj[row * k..(row + 1) * k].iter().zip(latent).map(|(a, b)| a * b).sum())
        .collect()
}

fn phone_runs(rng: &mut ChaCha8Rng, t: usize, phone_count: usize, run_dist: &Geometric) -> Vec<u16> {
    let mut phones = Vec::with_capacity(t);
    let mut current = rng.random_range(0..phone_count);
    while phones.len() < t {
        let run = 1 + run_dist.sample(rng) as usize;
        let take = run.min(t - phones.len());
        phones.extend(std::iter::repeat_n(current as u16, take));
        if phone_count > 1 {
            // uniform over the other phones
            let next = rng.random_range(0..phone_count - 1);
            current = if next >= current { next + 1 } else { next };
        }
    }
    phones
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::encode_archive;

    fn small() -> SynthSpec {
        SynthSpec {
            speakers: 3,
            utterances_per_speaker: 2,
            min_frames: 20,
            max_frames: 40,
            phone_count: 10,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn zero_noise_is_deterministic_and_unaugmented() {
        let spec = SynthSpec { noise_scale: 0.0, augment_noise_scale: 0.0, utterances_per_speaker: 1, ..small() };
        let a = synth_generate(&spec).unwrap();
        let b = synth_generate(&spec).unwrap();
        assert_eq!(a, b);
        for u in a.utterances() {
            assert_eq!(u.clean(), u.augmented());
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = SynthSpec { context_scale: 0.5, ..small() };
        assert_eq!(encode_archive(&synth_generate(&spec).unwrap()), encode_archive(&synth_generate(&spec).unwrap()));
        let other = SynthSpec { seed: 1, ..spec.clone() };
        assert_ne!(synth_generate(&spec).unwrap(), synth_generate(&other).unwrap());
    }

    #[test]
    fn speakers_share_phone_model_across_index_ranges() {
        let all = synth_generate(&SynthSpec { speakers: 4, ..small() }).unwrap();
        let tail = synth_generate(&SynthSpec { speakers: 2, first_speaker: 2, ..small() }).unwrap();
        assert_eq!(&all.utterances()[4..], tail.utterances());
    }

    #[test]
    fn lengths_labels_and_ranges() {
        let spec = SynthSpec { labelled_fraction: 1.0 / 3.0, ..small() };
        let c = synth_generate(&spec).unwrap();
        assert_eq!(c.len(), 6);
        for u in c.utterances() {
            assert!((20..=40).contains(&u.frames()));
            assert!(u.phones().iter().all(|&p| p < 10));
        }
        let labelled: Vec<_> = c.utterances().iter().map(|u| u.speaker()).collect();
        assert_eq!(labelled, vec![Some(0), Some(0), None, None, None, None]);
    }

    #[test]
    fn phone_runs_have_requested_mean() {
        let mut rng = stream_rng(5, 9);
        let dist = Geometric::new(1.0 / 4.0).unwrap();
        let phones = phone_runs(&mut rng, 40_000, 7, &dist);
        let changes = phones.windows(2).filter(|w| w[0] != w[1]).count();
        let mean_run = phones.len() as f64 / (changes + 1) as f64;
        assert!((mean_run - 4.0).abs() < 0.2, "{mean_run}");
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(synth_generate(&SynthSpec { speakers: 0, ..small() }).is_err());
        assert!(synth_generate(&SynthSpec { noise_scale: -1.0, ..small() }).is_err());
        assert!(synth_generate(&SynthSpec { min_frames: 50, max_frames: 40, ..small() }).is_err());
    }
}
