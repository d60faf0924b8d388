use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use selfspk::model::{DecoderKind, ModelConfig, SpeakerNet};
use selfspk::numerics::{Segments, Tensor};

fn config(decoder: DecoderKind, contexts: Vec<Vec<i32>>) -> ModelConfig {
    ModelConfig {
        feat_dim: 5,
        phone_count: 7,
        tdnn_widths: vec![12; contexts.len()],
        tdnn_contexts: contexts,
        embedding_dim: 6,
        penultimate_dim: 6,
        decoder_width: 9,
        decoder_layers: 3,
        decoder,
        ..ModelConfig::default()
    }
}

fn frames(rng: &mut ChaCha8Rng, t: usize, f: usize) -> Vec<f64> {
    (0..t * f).map(|_| rng.random_range(-2.0..2.0)).collect()
}

#[test]
fn duplicating_frames_keeps_pointwise_embedding() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net: SpeakerNet<f64> = SpeakerNet::new(config(DecoderKind::Ff, vec![vec![0]; 3]), &mut rng).unwrap();
    let x = frames(&mut rng, 23, 5);
    let doubled: Vec<f64> = x.chunks(5).flat_map(|row| row.iter().chain(row).copied().collect::<Vec<_>>()).collect();
    let a = net.embed(&x).unwrap();
    let b = net.embed(&doubled).unwrap();
    for (u, v) in a.iter().zip(&b) {
        assert!((u - v).abs() < 1e-10, "{u} vs {v}");
    }
}

#[test]
fn temporal_context_breaks_duplication_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net: SpeakerNet<f64> = SpeakerNet::new(config(DecoderKind::Ff, vec![vec![-2, 0, 2], vec![0]]), &mut rng).unwrap();
    let x = frames(&mut rng, 23, 5);
    let doubled: Vec<f64> = x.chunks(5).flat_map(|row| row.iter().chain(row).copied().collect::<Vec<_>>()).collect();
    assert_ne!(net.embed(&x).unwrap(), net.embed(&doubled).unwrap());
}

/// Rows of the decoder output that change when the phone at `frame` changes.
fn changed_rows(decoder: DecoderKind, frame: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net: SpeakerNet<f64> = SpeakerNet::new(config(decoder, vec![vec![-1, 0, 1], vec![0]]), &mut rng).unwrap();
    let t = 20;
    let x = frames(&mut rng, t, 5);
    let phones: Vec<u16> = (0..t).map(|i| (i % 7) as u16).collect();
    let mut altered = phones.clone();
    altered[frame] = (altered[frame] + 3) % 7;
    let segs = Arc::new(Segments::single(t).unwrap());
    let run = |phones: &[u16]| {
        let mut pass = net.pass(false);
        let e = pass.encode(Tensor::new(vec![t, 5], x.clone()).unwrap(), &segs).unwrap();
        let y = pass.decode(e, phones, &segs).unwrap();
        pass.tape.value(y).clone()
    };
    let (a, b) = (run(&phones), run(&altered));
    (0..t).filter(|&r| a.row(r) != b.row(r)).collect()
}

#[test]
fn frame_decoder_is_local() {
    assert_eq!(changed_rows(DecoderKind::Ff, 9), vec![9]);
}

#[test]
fn context_decoder_sees_seven_frames() {
    assert_eq!(changed_rows(DecoderKind::Ctx, 9), (6..=12).collect::<Vec<_>>());
    assert_eq!(changed_rows(DecoderKind::Ctx, 1), (0..=4).collect::<Vec<_>>());
}

#[test]
fn encoder_only_network_embeds_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cfg = config(DecoderKind::Ctx, vec![vec![-1, 0, 1], vec![0]]);
    cfg.speakers = 4;
    let net: SpeakerNet<f32> = SpeakerNet::new(cfg, &mut rng).unwrap();
    let stripped = net.encoder_only();
    assert!(!stripped.has_decoder() && !stripped.has_classifier());
    let x: Vec<f32> = (0..30 * 5).map(|i| ((i * 37 % 11) as f32 - 5.0) / 3.0).collect();
    assert_eq!(net.embed(&x).unwrap(), stripped.embed(&x).unwrap());
}
