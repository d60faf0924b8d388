//! Miniature corpus, model and training settings that run in seconds.

use selfspk::corpus::{synth_generate, Corpus, SynthSpec};
use selfspk::model::ModelConfig;
use selfspk::sampler::{SegmentConfig, Variant};
use selfspk::trainer::{Mode, TrainConfig};

pub fn synth(labelled_fraction: f64, seed: u64) -> SynthSpec {
    SynthSpec {
        speakers: 8,
        utterances_per_speaker: 6,
        min_frames: 60,
        max_frames: 80,
        feat_dim: 6,
        phone_count: 8,
        speaker_dim: 3,
        speaker_offset_scale: 2.0,
        labelled_fraction,
        seed,
        ..SynthSpec::default()
    }
}

pub fn corpus(labelled_fraction: f64) -> Corpus {
    synth_generate(&synth(labelled_fraction, 4)).unwrap()
}

pub fn model() -> ModelConfig {
    ModelConfig {
        tdnn_widths: vec![16, 16, 16, 16, 32],
        embedding_dim: 8,
        penultimate_dim: 8,
        decoder_width: 12,
        decoder_layers: 3,
        ..ModelConfig::default()
    }
}

pub fn train(mode: Mode, alpha: f64) -> TrainConfig {
    TrainConfig {
        mode,
        alpha,
        variant: Variant { cln: true, ctx: true, same: false },
        lr_init: 3e-3,
        minibatches_per_epoch: 4,
        max_epochs: 3,
        patience: 2,
        segments: SegmentConfig { min_frames: 20, max_frames: 40, batch_size: 6 },
        validation_fraction: 0.1,
        seed: 9,
        ..TrainConfig::default()
    }
}
