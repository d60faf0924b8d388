//! Central finite-difference checks in f64.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use selfspk::corpus::{synth_generate, Corpus, SynthSpec};
use selfspk::model::{DecoderKind, ModelConfig, SpeakerNet};
use selfspk::numerics::{GradBuffer, Segments, Tape, Tensor, Var};
use selfspk::sampler::{sample_pair, SegmentConfig, SegmentPair, Variant};
use selfspk::trainer::{joint_loss, Mode, SpeakerIndex};

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

/// Values bounded away from zero so ReLU kinks stay outside the stencil.
pub fn randn_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = randn(rng, shape, 1.0);
    for v in t.data_mut() {
        if v.abs() < 0.1 {
            *v = if *v < 0.0 { -0.1 - v.abs() } else { 0.1 + v.abs() };
        }
    }
    t
}

/// ‖a − b‖ / max(‖a‖, ‖b‖, 1e-6). The floor keeps gradients that are
/// structurally zero (a shift cancelled by a later batchnorm) from comparing
/// round-off against round-off.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-6)
}

/// Largest relative error between analytic and numeric gradients over all
/// inputs of a scalar graph built by `build` from leaf variables.
pub fn check_graph<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |inputs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
        let root = build(&mut tape, &vars);
        (tape, vars, root)
    };
    let (tape, vars, root) = eval(inputs);
    let grads = tape.backward(root).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; input.len()]);
        let mut numeric = Vec::with_capacity(input.len());
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let (tp, _, rp) = eval(&plus);
            let (tm, _, rm) = eval(&minus);
            numeric.push((tp.scalar(rp) - tm.scalar(rm)) / (2.0 * h));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Projects a tensor-valued output to a scalar with a fixed random target.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let rows = shape[0];
    let target = randn(&mut ChaCha8Rng::seed_from_u64(seed), &shape, 1.0);
    let segs = Arc::new(Segments::single(rows).unwrap());
    tape.segment_mse(out, &target, &segs).unwrap()
}

pub struct PrimitiveResult {
    pub name: &'static str,
    pub error: f64,
}

/// Finite-difference check of every differentiable tape operation.
pub fn primitive_suite() -> Vec<PrimitiveResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-5;
    let segs = Arc::new(Segments::from_lengths(&[3, 1, 4]).unwrap());
    let mut out = Vec::new();
    let mut push = |name, error| out.push(PrimitiveResult { name, error });

    let x = randn_away_from_zero(&mut rng, &[5, 4]);
    let w = randn(&mut rng, &[4, 3], 0.5);
    let b = randn(&mut rng, &[3], 0.5);
    push("affine", check_graph(&[x.clone(), w, b], h, |t, v| {
        let y = t.affine(v[0], v[1], Some(v[2])).unwrap();
        project(t, y, 1)
    }));

    let a = randn(&mut rng, &[3, 2], 1.0);
    let c = randn(&mut rng, &[3, 2], 1.0);
    push("add", check_graph(&[a, c], h, |t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        project(t, y, 2)
    }));

    push("relu", check_graph(&[randn_away_from_zero(&mut rng, &[4, 3])], h, |t, v| {
        let y = t.relu(v[0]);
        project(t, y, 3)
    }));

    let xb = randn(&mut rng, &[6, 3], 1.0);
    let g = randn(&mut rng, &[3], 1.0);
    let be = randn(&mut rng, &[3], 1.0);
    push("batchnorm (train)", check_graph(&[xb.clone(), g.clone(), be.clone()], h, |t, v| {
        let (y, _) = t.batchnorm_train(v[0], v[1], v[2], 1e-5).unwrap();
        project(t, y, 4)
    }));
    push("batchnorm (infer)", check_graph(&[xb, g, be], h, |t, v| {
        let y = t.batchnorm_infer(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0], 1e-5).unwrap();
        project(t, y, 5)
    }));

    let xs = randn(&mut rng, &[8, 2], 1.0);
    let s1 = Arc::clone(&segs);
    push("splice", check_graph(&[xs.clone()], h, move |t, v| {
        let y = t.splice(v[0], &[-2, 0, 1, 3], &s1).unwrap();
        project(t, y, 6)
    }));

    let wp = randn(&mut rng, &[3 * 5, 4], 1.0);
    let s2 = Arc::clone(&segs);
    push("phone lookup", check_graph(&[wp], h, move |t, v| {
        let y = t.phone_lookup(v[0], &[0, 4, 4, 2, 1, 1, 3, 0], 5, &[-1, 0, 2], &s2).unwrap();
        project(t, y, 7)
    }));

    let e = randn(&mut rng, &[3, 2], 1.0);
    let s3 = Arc::clone(&segs);
    push("expand rows", check_graph(&[e], h, move |t, v| {
        let y = t.expand_rows(v[0], &s3).unwrap();
        project(t, y, 8)
    }));

    let s4 = Arc::new(Segments::from_lengths(&[3, 2, 3]).unwrap());
    push("stats pool", check_graph(&[xs], h, move |t, v| {
        let y = t.stats_pool(v[0], &s4, 1e-10).unwrap();
        project(t, y, 9)
    }));

    push("softmax cross-entropy", check_graph(&[randn(&mut rng, &[4, 5], 2.0)], h, |t, v| {
        t.softmax_ce(v[0], &[0, 4, 2, 2]).unwrap()
    }));

    let target = randn(&mut rng, &[8, 3], 1.0);
    let s5 = Arc::clone(&segs);
    push("segment mse", check_graph(&[randn(&mut rng, &[8, 3], 1.0)], h, move |t, v| {
        t.segment_mse(v[0], &target, &s5).unwrap()
    }));

    push("sum", check_graph(&[x], h, |t, v| {
        let y = t.relu(v[0]);
        t.sum(y)
    }));

    push("weighted sum", check_graph(&[randn(&mut rng, &[2, 2], 1.0), randn(&mut rng, &[2, 2], 1.0)], h, |t, v| {
        let a = project(t, v[0], 10);
        let b = project(t, v[1], 11);
        t.weighted_sum(&[(a, 0.7), (b, -1.3), (a, 0.25)]).unwrap()
    }));
    out
}

pub fn tiny_model(decoder: DecoderKind, speakers: usize) -> ModelConfig {
    ModelConfig {
        feat_dim: 4,
        phone_count: 6,
        tdnn_contexts: vec![vec![-1, 0, 1], vec![-2, 0, 2], vec![0]],
        tdnn_widths: vec![6, 5, 7],
        embedding_dim: 4,
        penultimate_dim: 5,
        decoder_width: 6,
        decoder_layers: 3,
        decoder,
        speakers,
        ..ModelConfig::default()
    }
}

pub fn tiny_corpus() -> Corpus {
    synth_generate(&SynthSpec {
        speakers: 3,
        utterances_per_speaker: 2,
        min_frames: 30,
        max_frames: 40,
        feat_dim: 4,
        phone_count: 6,
        speaker_dim: 2,
        seed: 5,
        ..SynthSpec::default()
    })
    .unwrap()
}

pub fn tiny_pairs<'a>(corpus: &'a Corpus, supervised: &[bool]) -> Vec<SegmentPair<'a>> {
    let cfg = SegmentConfig { min_frames: 12, max_frames: 20, batch_size: 1 };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let variant = Variant { cln: true, ctx: true, same: false };
    supervised
        .iter()
        .enumerate()
        .map(|(i, &s)| sample_pair(&corpus.utterances()[i % corpus.len()], variant, &cfg, s, &mut rng).unwrap())
        .collect()
}

/// Per-tensor relative error between backprop and finite differences of
/// the joint loss, on a sample of elements of every trainable tensor.
pub fn end_to_end(mode: Mode, alpha: f64) -> Vec<(String, f64)> {
    let corpus = tiny_corpus();
    let speakers = SpeakerIndex::new(corpus.speakers());
    let n_spk = if mode == Mode::SelfSup { 0 } else { speakers.len() };
    let net = SpeakerNet::<f64>::new(tiny_model(DecoderKind::Ctx, n_spk), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let flags: Vec<bool> = match mode {
        Mode::Spk => vec![true; 4],
        Mode::SelfSup => vec![false; 4],
        Mode::SpkSelf => vec![true, false, true, false, false],
    };
    let pairs = tiny_pairs(&corpus, &flags);
    let loss = |net: &SpeakerNet<f64>| joint_loss(net, &pairs, &speakers, mode, alpha, true, None).unwrap().0.joint;
    let mut grads = GradBuffer::zeros_like(net.params());
    joint_loss(&net, &pairs, &speakers, mode, alpha, true, Some(&mut grads)).unwrap();

    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut results = Vec::new();
    for id in net.params().ids() {
        let entry = net.params().entry(id);
        if entry.kind != selfspk::numerics::ParamKind::Trainable {
            continue;
        }
        let n = entry.value.len();
        let picks: Vec<usize> = if n <= 6 { (0..n).collect() } else { (0..6).map(|_| rng.random_range(0..n)).collect() };
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &j in &picks {
            analytic.push(grads.get(id).data()[j]);
            let mut plus = net.clone();
            plus.params_mut().value_mut(id).data_mut()[j] += h;
            let mut minus = net.clone();
            minus.params_mut().value_mut(id).data_mut()[j] -= h;
            numeric.push((loss(&plus) - loss(&minus)) / (2.0 * h));
        }
        results.push((entry.name.clone(), relative_error(&analytic, &numeric)));
    }
    results
}
