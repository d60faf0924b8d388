//! TDNN encoder, phonetic decoder and speaker classifier.

mod checkpoint;

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{
    BatchStats, GradBuffer, Gradients, NumericsError, ParamId, ParamKind, ParamStore, Real, Segments, Tape, Tensor,
    Var,
};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointError, TrainingState};

/// Phone input of the decoder: the current frame only, or a ±3 frame window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    #[default]
    Ff,
    Ctx,
}

impl DecoderKind {
    pub fn offsets(self) -> Vec<i32> {
        match self {
            DecoderKind::Ff => vec![0],
            DecoderKind::Ctx => (-3..=3).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub phone_count: usize,
    pub tdnn_contexts: Vec<Vec<i32>>,
    pub tdnn_widths: Vec<usize>,
    pub embedding_dim: usize,
    pub penultimate_dim: usize,
    pub decoder_width: usize,
    pub decoder_layers: usize,
    pub decoder: DecoderKind,
    /// Classifier outputs; 0 builds no classifier.
    pub speakers: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub pool_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feat_dim: crate::corpus::FEATURE_DIM,
            phone_count: crate::corpus::PHONE_CLASSES,
            tdnn_contexts: vec![vec![-2, -1, 0, 1, 2], vec![-2, 0, 2], vec![-3, 0, 3], vec![0], vec![0]],
            tdnn_widths: vec![512, 512, 512, 512, 1500],
            embedding_dim: 512,
            penultimate_dim: 512,
            decoder_width: crate::corpus::PHONE_CLASSES,
            decoder_layers: 5,
            decoder: DecoderKind::Ff,
            speakers: 0,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            pool_eps: 1e-10,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_owned()));
        if self.tdnn_contexts.is_empty() || self.tdnn_contexts.len() != self.tdnn_widths.len() {
            return bad("tdnn_contexts and tdnn_widths must be non-empty and of equal length");
        }
        if self.tdnn_contexts.iter().any(Vec::is_empty) {
            return bad("every TDNN layer needs at least one context offset");
        }
        let dims = [self.feat_dim, self.phone_count, self.embedding_dim, self.penultimate_dim, self.decoder_width];
        if dims.contains(&0) || self.tdnn_widths.contains(&0) {
            return bad("all layer widths must be positive");
        }
        if self.phone_count > u16::MAX as usize + 1 {
            return bad("phone_count exceeds the 16-bit label range");
        }
        if self.decoder_layers == 0 {
            return bad("decoder needs at least one layer");
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad("bn_momentum must lie in (0, 1]");
        }
        if !(self.bn_eps > 0.0) || !(self.pool_eps >= 0.0) {
            return bad("bn_eps must be positive and pool_eps non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("non-finite activation at {layer}")]
    NonFinite { layer: String },
    #[error("parameter {0} is missing")]
    MissingParam(String),
    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    ParamShape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("model has no {0}")]
    MissingComponent(&'static str),
    #[error("input has {found} features per frame, expected {expected}")]
    InputWidth { expected: usize, found: usize },
}

enum Init {
    Uniform(f64),
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
    init: Init,
}

fn glorot(fan_in: usize, fan_out: usize) -> Init {
    Init::Uniform((6.0 / (fan_in + fan_out) as f64).sqrt())
}

fn push_dense(specs: &mut Vec<ParamSpec>, prefix: &str, rows: usize, cols: usize) {
    specs.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: vec![rows, cols],
        kind: ParamKind::Trainable,
        init: glorot(rows, cols),
    });
    specs.push(ParamSpec { name: format!("{prefix}.bias"), shape: vec![cols], kind: ParamKind::Trainable, init: Init::Zeros });
}

fn push_bn(specs: &mut Vec<ParamSpec>, prefix: &str, dim: usize) {
    let entries = [
        ("gamma", ParamKind::Trainable, Init::Ones),
        ("beta", ParamKind::Trainable, Init::Zeros),
        ("running_mean", ParamKind::Buffer, Init::Zeros),
        ("running_var", ParamKind::Buffer, Init::Ones),
    ];
    for (suffix, kind, init) in entries {
        specs.push(ParamSpec { name: format!("{prefix}.bn.{suffix}"), shape: vec![dim], kind, init });
    }
}

fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut width = cfg.feat_dim;
    for (i, (ctx, &w)) in cfg.tdnn_contexts.iter().zip(&cfg.tdnn_widths).enumerate() {
        let prefix = format!("encoder.tdnn{}", i + 1);
        push_dense(&mut specs, &prefix, width * ctx.len(), w);
        push_bn(&mut specs, &prefix, w);
        width = w;
    }
    push_bn(&mut specs, "encoder.pool", 2 * width);
    push_dense(&mut specs, "encoder.ff6", 2 * width, cfg.embedding_dim);
    push_bn(&mut specs, "encoder.ff6", cfg.embedding_dim);
    push_dense(&mut specs, "encoder.ff7", cfg.embedding_dim, cfg.penultimate_dim);
    push_bn(&mut specs, "encoder.ff7", cfg.penultimate_dim);

    let e = cfg.embedding_dim;
    let taps = cfg.decoder.offsets().len();
    let mut prev = taps * cfg.phone_count;
    for l in 0..cfg.decoder_layers {
        let last = l + 1 == cfg.decoder_layers;
        let out = if last { cfg.feat_dim } else { cfg.decoder_width };
        let prefix = format!("decoder.layer{l}");
        let init = || glorot(prev + e, out);
        let input = if l == 0 { "phone_weight" } else { "hidden_weight" };
        specs.push(ParamSpec { name: format!("{prefix}.{input}"), shape: vec![prev, out], kind: ParamKind::Trainable, init: init() });
        specs.push(ParamSpec { name: format!("{prefix}.embed_weight"), shape: vec![e, out], kind: ParamKind::Trainable, init: init() });
        specs.push(ParamSpec { name: format!("{prefix}.bias"), shape: vec![out], kind: ParamKind::Trainable, init: Init::Zeros });
        if !last {
            push_bn(&mut specs, &prefix, out);
        }
        prev = out;
    }
    if cfg.speakers > 0 {
        push_dense(&mut specs, "classifier", cfg.penultimate_dim, cfg.speakers);
    }
    specs
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Bn {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Clone, Debug)]
struct TdnnLayer {
    offsets: Vec<i32>,
    dense: Dense,
    bn: Bn,
}

#[derive(Clone, Debug)]
struct EncoderLayout {
    tdnn: Vec<TdnnLayer>,
    pool_bn: Bn,
    ff6: Dense,
    ff6_bn: Bn,
    ff7: Dense,
    ff7_bn: Bn,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    input: ParamId,
    embed: Dense,
    bn: Option<Bn>,
}

/// Encoder plus optional decoder and classifier over one parameter store.
#[derive(Clone, Debug)]
pub struct SpeakerNet<T: Real = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
    encoder: EncoderLayout,
    decoder: Option<Vec<DecoderLayer>>,
    classifier: Option<Dense>,
}

/// Batch statistics of every training-mode batchnorm in one pass.
#[derive(Clone, Debug, Default)]
pub struct BnUpdates {
    entries: Vec<(ParamId, ParamId, BatchStats)>,
}

impl BnUpdates {
    pub fn extend(&mut self, other: BnUpdates) {
        self.entries.extend(other.entries);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl<T: Real> SpeakerNet<T> {
    /// Fresh network with Glorot-uniform weights, zero biases, unit scales.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        for spec in param_specs(&config) {
            let len = spec.shape.iter().product();
            let data = match spec.init {
                Init::Uniform(limit) => (0..len).map(|_| T::of_f64(rng.random_range(-limit..limit))).collect(),
                Init::Zeros => vec![T::zero(); len],
                Init::Ones => vec![T::one(); len],
            };
            store.insert(spec.name, spec.kind, Tensor::new(spec.shape, data)?);
        }
        Self::from_params(config, store)
    }

    /// Wraps a loaded store. Encoder tensors are required; decoder and
    /// classifier are attached only when their tensors are present.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = param_specs(&config);
        for spec in &specs {
            let Some(id) = params.id(&spec.name) else { continue };
            let found = params.value(id).shape();
            if found != spec.shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: found.to_vec(),
                });
            }
        }
        let get = |name: String| params.id(&name).ok_or(ModelError::MissingParam(name));
        let dense = |p: &str| -> Result<Dense, ModelError> {
            Ok(Dense { weight: get(format!("{p}.weight"))?, bias: get(format!("{p}.bias"))? })
        };
        let bn = |p: &str| -> Result<Bn, ModelError> {
            Ok(Bn {
                gamma: get(format!("{p}.bn.gamma"))?,
                beta: get(format!("{p}.bn.beta"))?,
                mean: get(format!("{p}.bn.running_mean"))?,
                var: get(format!("{p}.bn.running_var"))?,
            })
        };
        let mut tdnn = Vec::new();
        for (i, ctx) in config.tdnn_contexts.iter().enumerate() {
            let p = format!("encoder.tdnn{}", i + 1);
            tdnn.push(TdnnLayer { offsets: ctx.clone(), dense: dense(&p)?, bn: bn(&p)? });
        }
        let encoder = EncoderLayout {
            tdnn,
            pool_bn: bn("encoder.pool")?,
            ff6: dense("encoder.ff6")?,
            ff6_bn: bn("encoder.ff6")?,
            ff7: dense("encoder.ff7")?,
            ff7_bn: bn("encoder.ff7")?,
        };
        let decoder = if params.id("decoder.layer0.embed_weight").is_some() {
            let mut layers = Vec::new();
            for l in 0..config.decoder_layers {
                let p = format!("decoder.layer{l}");
                let input = if l == 0 { "phone_weight" } else { "hidden_weight" };
                layers.push(DecoderLayer {
                    input: get(format!("{p}.{input}"))?,
                    embed: Dense { weight: get(format!("{p}.embed_weight"))?, bias: get(format!("{p}.bias"))? },
                    bn: if l + 1 < config.decoder_layers { Some(bn(&p)?) } else { None },
                });
            }
            Some(layers)
        } else {
            None
        };
        let classifier = if config.speakers > 0 && params.id("classifier.weight").is_some() {
            Some(dense("classifier")?)
        } else {
            None
        };
        Ok(Self { config, params, encoder, decoder, classifier })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn has_decoder(&self) -> bool {
        self.decoder.is_some()
    }

    pub fn has_classifier(&self) -> bool {
        self.classifier.is_some()
    }

    /// Copy holding only the encoder tensors.
    pub fn encoder_only(&self) -> Self {
        let mut store = ParamStore::new();
        for e in self.params.entries().iter().filter(|e| e.name.starts_with("encoder.")) {
            store.insert(e.name.clone(), e.kind, e.value.clone());
        }
        Self::from_params(self.config.clone(), store).expect("encoder tensors are complete")
    }

    pub fn cast<U: Real>(&self) -> SpeakerNet<U> {
        SpeakerNet::from_params(self.config.clone(), self.params.cast()).expect("same layout")
    }

    pub fn pass(&self, train: bool) -> Pass<'_, T> {
        Pass { net: self, tape: Tape::new(), train, leaves: HashMap::new(), updates: BnUpdates::default() }
    }

    /// Folds batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, updates: &BnUpdates) {
        let m = self.config.bn_momentum;
        for (mean_id, var_id, stats) in &updates.entries {
            for (id, batch) in [(*mean_id, &stats.mean), (*var_id, &stats.var)] {
                for (r, b) in self.params.value_mut(id).data_mut().iter_mut().zip(batch) {
                    *r = T::of_f64((1.0 - m) * r.as_f64() + m * b);
                }
            }
        }
    }

    /// Embedding of one frame sequence (`T × F`, row-major) in inference mode.
    pub fn embed(&self, frames: &[T]) -> Result<Vec<T>, ModelError> {
        let f = self.config.feat_dim;
        if frames.is_empty() || frames.len() % f != 0 {
            return Err(ModelError::InputWidth { expected: f, found: frames.len() % f.max(1) });
        }
        let t = frames.len() / f;
        let segs = Arc::new(Segments::single(t)?);
        let mut pass = self.pass(false);
        let x = Tensor::new(vec![t, f], frames.to_vec())?;
        let e = pass.encode(x, &segs)?;
        Ok(pass.tape.value(e).data().to_vec())
    }

    /// Classifier input computed from an embedding in inference mode.
    pub fn classifier_head(&self, embedding: &[T]) -> Result<Vec<T>, ModelError> {
        let mut pass = self.pass(false);
        let e = pass.tape.constant(Tensor::new(vec![1, embedding.len()], embedding.to_vec())?);
        let h = pass.head(e)?;
        Ok(pass.tape.value(h).data().to_vec())
    }

    /// Speaker posterior for one embedding.
    pub fn classifier_posterior(&self, embedding: &[T]) -> Result<Vec<f64>, ModelError> {
        let mut pass = self.pass(false);
        let e = pass.tape.constant(Tensor::new(vec![1, embedding.len()], embedding.to_vec())?);
        let logits = pass.classify(e)?;
        let z: Vec<f64> = pass.tape.value(logits).data().iter().map(|v| v.as_f64()).collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exp.iter().sum();
        Ok(exp.into_iter().map(|v| v / sum).collect())
    }
}

/// One forward pass on a fresh tape.
pub struct Pass<'m, T: Real> {
    net: &'m SpeakerNet<T>,
    pub tape: Tape<T>,
    train: bool,
    leaves: HashMap<ParamId, Var>,
    updates: BnUpdates,
}

impl<'m, T: Real> Pass<'m, T> {
    fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.leaves.get(&id) {
            return v;
        }
        let v = self.tape.param(&self.net.params, id);
        self.leaves.insert(id, v);
        v
    }

    fn dense(&mut self, x: Var, d: Dense) -> Result<Var, ModelError> {
        let w = self.param(d.weight);
        let b = self.param(d.bias);
        Ok(self.tape.affine(x, w, Some(b))?)
    }

    fn bn(&mut self, x: Var, ids: Bn) -> Result<Var, ModelError> {
        let gamma = self.param(ids.gamma);
        let beta = self.param(ids.beta);
        let eps = self.net.config.bn_eps;
        if self.train {
            let (y, stats) = self.tape.batchnorm_train(x, gamma, beta, eps)?;
            self.updates.entries.push((ids.mean, ids.var, stats));
            Ok(y)
        } else {
            let params = &self.net.params;
            let (m, v) = (params.value(ids.mean).data(), params.value(ids.var).data());
            Ok(self.tape.batchnorm_infer(x, gamma, beta, m, v, eps)?)
        }
    }

    fn check(&self, v: Var, layer: impl FnOnce() -> String) -> Result<Var, ModelError> {
        if self.tape.value(v).is_finite() {
            Ok(v)
        } else {
            Err(ModelError::NonFinite { layer: layer() })
        }
    }

    /// Embeddings (`S × E`) of packed encode frames (`T_total × F`).
    pub fn encode(&mut self, frames: Tensor<T>, segs: &Arc<Segments>) -> Result<Var, ModelError> {
        let f = self.net.config.feat_dim;
        if frames.cols() != f {
            return Err(ModelError::InputWidth { expected: f, found: frames.cols() });
        }
        let enc = self.net.encoder.clone();
        let mut h = self.tape.constant(frames);
        for (i, layer) in enc.tdnn.iter().enumerate() {
            let x = if layer.offsets == [0] { h } else { self.tape.splice(h, &layer.offsets, segs)? };
            let a = self.dense(x, layer.dense)?;
            let r = self.tape.relu(a);
            h = self.bn(r, layer.bn)?;
            h = self.check(h, || format!("encoder.tdnn{}", i + 1))?;
        }
        let pooled = self.tape.stats_pool(h, segs, self.net.config.pool_eps)?;
        let pooled = self.bn(pooled, enc.pool_bn)?;
        let e = self.dense(pooled, enc.ff6)?;
        self.check(e, || "encoder.ff6".to_owned())
    }

    /// FF6 activation, FF7 and their normalizations: the classifier input.
    fn head(&mut self, embedding: Var) -> Result<Var, ModelError> {
        let enc = self.net.encoder.clone();
        let r = self.tape.relu(embedding);
        let h = self.bn(r, enc.ff6_bn)?;
        let h = self.dense(h, enc.ff7)?;
        let r = self.tape.relu(h);
        let h = self.bn(r, enc.ff7_bn)?;
        self.check(h, || "encoder.ff7".to_owned())
    }

    /// Speaker logits (`S × N`).
    pub fn classify(&mut self, embedding: Var) -> Result<Var, ModelError> {
        let c = self.net.classifier.ok_or(ModelError::MissingComponent("classifier"))?;
        let h = self.head(embedding)?;
        let logits = self.dense(h, c)?;
        self.check(logits, || "classifier".to_owned())
    }

    /// Predicted decode frames (`T_total × F`) from phone labels and the
    /// embedding of the segment each frame belongs to.
    pub fn decode(&mut self, embedding: Var, phones: &[u16], segs: &Arc<Segments>) -> Result<Var, ModelError> {
        let layers = self.net.decoder.clone().ok_or(ModelError::MissingComponent("decoder"))?;
        let cfg = &self.net.config;
        let (phone_count, offsets) = (cfg.phone_count, cfg.decoder.offsets());
        let mut h = None;
        for (l, layer) in layers.iter().enumerate() {
            let w = self.param(layer.input);
            let from_input = match h {
                None => self.tape.phone_lookup(w, phones, phone_count, &offsets, segs)?,
                Some(prev) => self.tape.affine(prev, w, None)?,
            };
            let per_segment = self.dense(embedding, layer.embed)?;
            let from_embedding = self.tape.expand_rows(per_segment, segs)?;
            let mut out = self.tape.add(from_input, from_embedding)?;
            if let Some(bn) = layer.bn {
                let r = self.tape.relu(out);
                out = self.bn(r, bn)?;
            }
            h = Some(self.check(out, || format!("decoder.layer{l}"))?);
        }
        Ok(h.expect("at least one decoder layer"))
    }

    /// Adds parameter gradients of this pass into `buffer`.
    pub fn accumulate(&self, grads: &Gradients<T>, buffer: &mut GradBuffer<T>) {
        for (id, g) in grads.params() {
            if let Some(g) = g {
                buffer.add(id, g);
            }
        }
    }

    pub fn finish(self) -> (Tape<T>, BnUpdates) {
        (self.tape, self.updates)
    }
}
