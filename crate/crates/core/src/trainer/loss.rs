use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::{BnUpdates, SpeakerNet};
use crate::numerics::{GradBuffer, Real, Segments, Tensor};
use crate::sampler::SegmentPair;

/// Which loss terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Speaker classification only (α = 0).
    #[serde(rename = "spk")]
    Spk,
    /// Reconstruction only; no speaker labels are read.
    #[serde(rename = "self")]
    SelfSup,
    /// Classification on labelled segments plus reconstruction on all.
    #[serde(rename = "spk+self")]
    SpkSelf,
}

impl Mode {
    pub fn uses_ce(self) -> bool {
        self != Mode::SelfSup
    }

    pub fn uses_mse(self) -> bool {
        self != Mode::Spk
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Spk => "spk",
            Mode::SelfSup => "self",
            Mode::SpkSelf => "spk+self",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "spk" => Ok(Mode::Spk),
            "self" => Ok(Mode::SelfSup),
            "spk+self" => Ok(Mode::SpkSelf),
            other => Err(format!("unknown mode {other:?} (expected spk, self or spk+self)")),
        }
    }
}

/// Maps corpus speaker labels to contiguous classifier outputs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SpeakerIndex {
    map: BTreeMap<u32, usize>,
}

impl SpeakerIndex {
    pub fn new(labels: impl IntoIterator<Item = u32>) -> Self {
        let mut sorted: Vec<u32> = labels.into_iter().collect();
        sorted.sort_unstable();
        sorted.dedup();
        Self { map: sorted.into_iter().enumerate().map(|(i, s)| (s, i)).collect() }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn class(&self, speaker: u32) -> Option<usize> {
        self.map.get(&speaker).copied()
    }
}

/// Loss components of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    /// Mean CE over labelled segments.
    pub ce: Option<f64>,
    /// Mean per-segment MSE over all segments.
    pub mse: Option<f64>,
    pub joint: f64,
    pub labelled: usize,
    pub segments: usize,
}

fn pack<T: Real>(rows: impl Iterator<Item = f32>, cols: usize) -> Result<Tensor<T>, TrainError> {
    let data: Vec<T> = rows.map(|v| T::of_f64(v as f64)).collect();
    let n = data.len() / cols;
    Ok(Tensor::new(vec![n, cols], data)?)
}

/// `(1/N_lab) Σ δ_i·CE_i + α·(1/N) Σ MSE_i` over `pairs`.
///
/// Labelled and unlabelled segments run as separate forward passes, so the
/// CE term (and every labelled-segment activation) is independent of the
/// unlabelled part of the batch. Gradients are added to `grads` when given.
pub fn joint_loss<T: Real>(
    net: &SpeakerNet<T>,
    pairs: &[SegmentPair<'_>],
    speakers: &SpeakerIndex,
    mode: Mode,
    alpha: f64,
    train: bool,
    mut grads: Option<&mut GradBuffer<T>>,
) -> Result<(LossParts, BnUpdates), TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(TrainError::Config(format!("alpha must be finite and non-negative, got {alpha}")));
    }
    if mode == Mode::Spk {
        if let Some(p) = pairs.iter().find(|p| !p.supervised) {
            return Err(TrainError::Config(format!(
                "spk mode received unlabelled segment from {}",
                p.utterance.id()
            )));
        }
    }
    let total = pairs.len();
    let labelled: Vec<SegmentPair<'_>> = pairs.iter().filter(|p| p.supervised).copied().collect();
    let unlabelled: Vec<SegmentPair<'_>> = pairs.iter().filter(|p| !p.supervised).copied().collect();
    let f = net.config().feat_dim;

    let mut updates = BnUpdates::default();
    let mut joint = 0.0f64;
    let mut ce = None;
    let mut mse_sum = 0.0f64;
    for (group, is_labelled) in [(&labelled, true), (&unlabelled, false)] {
        if group.is_empty() {
            continue;
        }
        let with_ce = is_labelled && mode.uses_ce();
        let enc_segs = Arc::new(Segments::from_lengths(&group.iter().map(|p| p.encode.len).collect::<Vec<_>>())?);
        let mut pass = net.pass(train);
        let frames = pack::<T>(group.iter().flat_map(|p| p.encode_frames().iter().copied()), f)?;
        let emb = pass.encode(frames, &enc_segs)?;
        let mut terms = Vec::new();
        let mut ce_var = None;
        if with_ce {
            let labels = group
                .iter()
                .map(|p| {
                    let s = p.speaker().expect("supervised segment carries a label");
                    speakers.class(s).ok_or_else(|| {
                        TrainError::Config(format!("speaker {s} of {} has no classifier output", p.utterance.id()))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let logits = pass.classify(emb)?;
            let v = pass.tape.softmax_ce(logits, &labels)?;
            terms.push((v, 1.0));
            ce_var = Some(v);
        }
        let mut mse_var = None;
        if mode.uses_mse() {
            let dec_segs = Arc::new(Segments::from_lengths(&group.iter().map(|p| p.decode.len).collect::<Vec<_>>())?);
            let phones: Vec<u16> = group.iter().flat_map(|p| p.decode_phones().iter().copied()).collect();
            let target = pack::<T>(group.iter().flat_map(|p| p.decode_frames().iter().copied()), f)?;
            let pred = pass.decode(emb, &phones, &dec_segs)?;
            let v = pass.tape.segment_mse(pred, &target, &dec_segs)?;
            terms.push((v, alpha * group.len() as f64 / total as f64));
            mse_var = Some(v);
        }
        let root = pass.tape.weighted_sum(&terms)?;
        joint += pass.tape.scalar(root);
        if let Some(v) = ce_var {
            ce = Some(pass.tape.scalar(v));
        }
        if let Some(v) = mse_var {
            mse_sum += pass.tape.scalar(v) * group.len() as f64;
        }
        if let Some(buffer) = grads.as_deref_mut() {
            let g = pass.tape.backward(root)?;
            pass.accumulate(&g, buffer);
        }
        let (_, u) = pass.finish();
        updates.extend(u);
    }
    let mse = mode.uses_mse().then(|| mse_sum / total as f64);
    Ok((LossParts { ce, mse, joint, labelled: labelled.len(), segments: total }, updates))
}
