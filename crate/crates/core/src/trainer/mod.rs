//! Loss assembly, training loop, schedule and validation.

mod loss;
mod schedule;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{compute_global_norm, Corpus, CorpusError, NormStats};
use crate::model::{
    write_checkpoint, Checkpoint, CheckpointError, DecoderKind, ModelConfig, ModelError, SpeakerNet, TrainingState,
};
use crate::numerics::{adam_step, AdamConfig, AdamState, GradBuffer, NumericsError};
use crate::rng::stream_rng;
use crate::sampler::{compose_batch, sample_pair, Composition, SampleError, SamplingPools, SegmentConfig, SegmentPair, Variant};

pub use loss::{joint_loss, LossParts, Mode, SpeakerIndex};
pub use schedule::{schedule_update, Schedule, ScheduleEvent};

/// RNG stream offsets derived from the run seed.
const INIT_STREAM: u64 = 1 << 40;
const VALIDATION_STREAM: u64 = 2 << 40;
const BATCH_STREAM: u64 = 3 << 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub variant: Variant,
    pub alpha: f64,
    pub lr_init: f64,
    pub patience: u32,
    pub minibatches_per_epoch: usize,
    pub max_epochs: u64,
    /// Training stops once the rate has been halved more than this many times.
    pub max_halvings: u32,
    /// Defaults to the composition implied by the mode.
    pub composition: Option<Composition>,
    pub segments: SegmentConfig,
    pub validation_fraction: f64,
    pub validation_pairs_per_utterance: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::SelfSup,
            variant: Variant::default(),
            alpha: 1.0,
            lr_init: 1e-2,
            patience: 32,
            minibatches_per_epoch: 400,
            max_epochs: 100,
            max_halvings: 7,
            composition: None,
            segments: SegmentConfig::default(),
            validation_fraction: 0.02,
            validation_pairs_per_utterance: 2,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be finite and non-negative, got {}", self.alpha));
        }
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return bad(format!("lr_init must be positive, got {}", self.lr_init));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.minibatches_per_epoch == 0 {
            return bad("minibatches_per_epoch must be at least 1".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)".into());
        }
        if self.validation_pairs_per_utterance == 0 {
            return bad("validation_pairs_per_utterance must be at least 1".into());
        }
        self.segments.validate()?;
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("non-finite training loss at epoch {epoch}, batch {batch}: {detail}\nbatch segments:\n{dump}")]
    NonFinite { epoch: u64, batch: u64, detail: String, dump: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl TrainError {
    /// True for failures caused by numerical blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFinite { .. } | TrainError::Model(ModelError::NonFinite { .. }) | TrainError::Numerics(NumericsError::NonFinite { .. })
        )
    }
}

/// Position in a run: everything besides weights and optimizer moments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Progress {
    pub epoch: u64,
    pub batches: u64,
    pub schedule: Schedule,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u64,
    /// Rate used during the epoch.
    pub lr: f64,
    pub train_ce: Option<f64>,
    pub train_mse: Option<f64>,
    pub train_loss: f64,
    pub val_loss: f64,
    pub event: ScheduleEvent,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_owned(), |v| format!("{v:.9e}"))
}

impl EpochMetrics {
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} lr={:.6e} train_ce={} train_mse={} train_loss={:.9e} val_loss={:.9e} event={:?}",
            self.epoch,
            self.lr,
            fmt_opt(self.train_ce),
            fmt_opt(self.train_mse),
            self.train_loss,
            self.val_loss,
            self.event
        )
    }
}

/// Model configuration adapted to a corpus and run: input and phone
/// dimensions from the data, decoder kind from the variant, classifier size
/// from the labelled speakers.
pub fn resolve_model_config(base: &ModelConfig, corpus: &Corpus, cfg: &TrainConfig, speakers: &SpeakerIndex) -> ModelConfig {
    let mut m = base.clone();
    m.feat_dim = corpus.feat_dim();
    m.phone_count = corpus.phone_count();
    m.decoder = if cfg.variant.ctx { DecoderKind::Ctx } else { DecoderKind::Ff };
    m.speakers = if cfg.mode.uses_ce() { speakers.len() } else { 0 };
    m
}

/// Training state over a normalized corpus.
pub struct Trainer<'c> {
    cfg: TrainConfig,
    corpus: &'c Corpus,
    pools: SamplingPools,
    composition: Composition,
    validation: Vec<SegmentPair<'c>>,
    speakers: SpeakerIndex,
    pub net: SpeakerNet<f32>,
    pub adam: AdamState<f32>,
    pub progress: Progress,
}

impl<'c> Trainer<'c> {
    pub fn new(corpus: &'c Corpus, cfg: TrainConfig, model: &ModelConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let speakers = SpeakerIndex::new(corpus.utterances().iter().filter_map(|u| u.speaker()));
        let model = resolve_model_config(model, corpus, &cfg, &speakers);
        let net = SpeakerNet::new(model, &mut stream_rng(cfg.seed, INIT_STREAM))?;
        Self::assemble(corpus, cfg, speakers, net, None)
    }

    /// Continues from a checkpoint carrying optimizer state.
    pub fn resume(corpus: &'c Corpus, cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self, TrainError> {
        cfg.validate()?;
        let speakers = SpeakerIndex::new(corpus.utterances().iter().filter_map(|u| u.speaker()));
        let expected = resolve_model_config(&ckpt.model, corpus, &cfg, &speakers);
        if expected != ckpt.model {
            return Err(TrainError::Config("checkpoint model does not match this corpus and configuration".into()));
        }
        let training = ckpt
            .training
            .clone()
            .ok_or_else(|| TrainError::Config("checkpoint has no optimizer state to resume from".into()))?;
        let net = ckpt.network()?;
        Self::assemble(corpus, cfg, speakers, net, Some(training))
    }

    fn assemble(
        corpus: &'c Corpus,
        cfg: TrainConfig,
        speakers: SpeakerIndex,
        net: SpeakerNet<f32>,
        training: Option<TrainingState>,
    ) -> Result<Self, TrainError> {
        if cfg.mode.uses_ce() && speakers.is_empty() {
            return Err(TrainError::Config(format!("mode {} needs speaker labels but the corpus has none", cfg.mode)));
        }
        let eligible = SamplingPools::new(corpus, &cfg.segments);
        let (held_out, train_indices) = split_validation(&eligible, &cfg);
        let pools = SamplingPools::from_indices(corpus, &cfg.segments, train_indices);
        let composition = cfg.composition.unwrap_or(match cfg.mode {
            Mode::Spk => Composition::Supervised,
            Mode::SelfSup => Composition::Unsupervised,
            Mode::SpkSelf if pools.unlabelled.is_empty() => Composition::Supervised,
            Mode::SpkSelf => Composition::Semisupervised,
        });
        if cfg.mode == Mode::Spk && composition != Composition::Supervised {
            return Err(TrainError::Config("spk mode requires supervised batch composition".into()));
        }
        let mut rng = stream_rng(cfg.seed, VALIDATION_STREAM);
        let mut validation = Vec::new();
        for &i in &held_out {
            let u = &corpus.utterances()[i];
            let supervised = cfg.mode.uses_ce() && u.is_labelled();
            for _ in 0..cfg.validation_pairs_per_utterance {
                validation.push(sample_pair(u, cfg.variant, &cfg.segments, supervised, &mut rng)?);
            }
        }
        if validation.is_empty() {
            return Err(TrainError::Config("validation set is empty".into()));
        }
        let (adam, progress) = match training {
            Some(t) => {
                let schedule = Schedule { lr: t.lr, best: t.best_loss, since_improvement: t.since_improvement };
                (t.adam, Progress { epoch: t.epoch, batches: t.batches, schedule })
            }
            None => (
                AdamState::new(net.params()),
                Progress { epoch: 0, batches: 0, schedule: Schedule::new(cfg.lr_init) },
            ),
        };
        Ok(Self { cfg, corpus, pools, composition, validation, speakers, net, adam, progress })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn speakers(&self) -> &SpeakerIndex {
        &self.speakers
    }

    pub fn validation_pairs(&self) -> &[SegmentPair<'c>] {
        &self.validation
    }

    pub fn composition(&self) -> Composition {
        self.composition
    }

    /// Whether training should stop before another epoch.
    pub fn finished(&self) -> bool {
        let floor = self.cfg.lr_init / 2f64.powi(self.cfg.max_halvings as i32);
        self.progress.epoch >= self.cfg.max_epochs || self.progress.schedule.lr < floor
    }

    /// One optimizer step on a freshly drawn minibatch.
    pub fn step(&mut self) -> Result<LossParts, TrainError> {
        let mut rng = stream_rng(self.cfg.seed, BATCH_STREAM + self.progress.batches);
        let batch = compose_batch(self.corpus, &self.pools, self.composition, self.cfg.variant, &self.cfg.segments, &mut rng)?;
        let mut grads = GradBuffer::zeros_like(self.net.params());
        let nonfinite = |detail: String, this: &Self| TrainError::NonFinite {
            epoch: this.progress.epoch + 1,
            batch: this.progress.batches,
            detail,
            dump: dump_batch(&batch.pairs),
        };
        let (parts, updates) =
            match joint_loss(&self.net, &batch.pairs, &self.speakers, self.cfg.mode, self.cfg.alpha, true, Some(&mut grads)) {
                Ok(r) => r,
                Err(TrainError::Model(ModelError::NonFinite { layer })) => {
                    return Err(nonfinite(format!("activation at {layer}"), self))
                }
                Err(e) => return Err(e),
            };
        if !parts.joint.is_finite() {
            return Err(nonfinite(format!("loss {}", parts.joint), self));
        }
        if let Err(e) = adam_step(self.net.params_mut(), &grads, &mut self.adam, self.progress.schedule.lr, &self.cfg.adam) {
            return Err(nonfinite(e.to_string(), self));
        }
        self.net.apply_bn_updates(&updates);
        self.progress.batches += 1;
        Ok(parts)
    }

    /// Joint loss of the fixed validation pairs in inference mode.
    pub fn validate(&self) -> Result<LossParts, TrainError> {
        Ok(joint_loss(&self.net, &self.validation, &self.speakers, self.cfg.mode, self.cfg.alpha, false, None)?.0)
    }

    /// `minibatches_per_epoch` steps, a validation and a schedule update.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics, TrainError> {
        let n = self.cfg.minibatches_per_epoch;
        let (mut ce, mut mse, mut joint) = (0.0, 0.0, 0.0);
        let (mut has_ce, mut has_mse) = (false, false);
        let lr = self.progress.schedule.lr;
        for _ in 0..n {
            let parts = self.step()?;
            if let Some(v) = parts.ce {
                ce += v;
                has_ce = true;
            }
            if let Some(v) = parts.mse {
                mse += v;
                has_mse = true;
            }
            joint += parts.joint;
        }
        self.progress.epoch += 1;
        let val = self.validate()?.joint;
        if !val.is_finite() {
            return Err(TrainError::NonFinite {
                epoch: self.progress.epoch,
                batch: self.progress.batches,
                detail: format!("validation loss {val}"),
                dump: dump_batch(&self.validation),
            });
        }
        let event = schedule_update(&mut self.progress.schedule, val, self.cfg.patience);
        Ok(EpochMetrics {
            epoch: self.progress.epoch,
            lr,
            train_ce: has_ce.then(|| ce / n as f64),
            train_mse: has_mse.then(|| mse / n as f64),
            train_loss: joint / n as f64,
            val_loss: val,
            event,
        })
    }

    pub fn checkpoint(&self, echo: &str, norm: Option<&NormStats>) -> Checkpoint {
        Checkpoint {
            model: self.net.config().clone(),
            echo: echo.to_owned(),
            norm: norm.cloned(),
            params: self.net.params().clone(),
            training: Some(TrainingState {
                adam: self.adam.clone(),
                epoch: self.progress.epoch,
                batches: self.progress.batches,
                lr: self.progress.schedule.lr,
                best_loss: self.progress.schedule.best,
                since_improvement: self.progress.schedule.since_improvement,
            }),
        }
    }
}

/// Held-out utterances per label class, chosen once from the run seed.
fn split_validation(eligible: &SamplingPools, cfg: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    let mut rng = stream_rng(cfg.seed, VALIDATION_STREAM + 1);
    let mut held = Vec::new();
    // Speaker-only training never sees unlabelled utterances.
    let unlabelled: &[usize] = if cfg.mode == Mode::Spk { &[] } else { &eligible.unlabelled };
    for pool in [&eligible.labelled[..], unlabelled] {
        if pool.is_empty() {
            continue;
        }
        let mut shuffled = pool.to_vec();
        shuffled.shuffle(&mut rng);
        let n = ((pool.len() as f64 * cfg.validation_fraction).ceil() as usize).min(pool.len().saturating_sub(1));
        held.extend_from_slice(&shuffled[..n]);
    }
    held.sort_unstable();
    let train = eligible.all.iter().copied().filter(|i| held.binary_search(i).is_err()).collect();
    (held, train)
}

fn dump_batch(pairs: &[SegmentPair<'_>]) -> String {
    pairs
        .iter()
        .map(|p| {
            format!(
                "{} delta={} encode={}+{} decode={}+{}",
                p.utterance.id(),
                p.delta(),
                p.encode.start,
                p.encode.len,
                p.decode.start,
                p.decode.len
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Outcome of [`train_run`].
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub epochs: Vec<EpochMetrics>,
    pub best_loss: f64,
    /// Mean CE over mean MSE in the first epoch, when both terms are active.
    pub calibration_ratio: Option<f64>,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

pub const METRICS_FILE: &str = "metrics.log";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_owned(), source }
}

/// Trains on `corpus` (raw features), writing `metrics.log`, `best.ckpt`
/// and `last.ckpt` into `out_dir`. With `resume`, normalization, weights,
/// optimizer moments and schedule come from the checkpoint and the metric
/// log is truncated to the checkpoint's epoch before appending.
pub fn train_run(
    corpus: &Corpus,
    cfg: &TrainConfig,
    model: &ModelConfig,
    out_dir: &Path,
    echo: &str,
    resume: Option<&Checkpoint>,
) -> Result<TrainSummary, TrainError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let norm = match resume.and_then(|c| c.norm.clone()) {
        Some(n) => n,
        None => compute_global_norm(corpus)?,
    };
    let normalized = corpus.normalized(&norm);
    let mut trainer = match resume {
        Some(ckpt) => Trainer::resume(&normalized, cfg.clone(), ckpt)?,
        None => Trainer::new(&normalized, cfg.clone(), model)?,
    };
    info!(
        "training mode={} variant={} composition={:?} speakers={} validation pairs={}",
        cfg.mode,
        cfg.variant.label(),
        trainer.composition(),
        trainer.speakers().len(),
        trainer.validation_pairs().len()
    );

    let log_path = out_dir.join(METRICS_FILE);
    let start_epoch = trainer.progress.epoch;
    let kept: String = match fs::read_to_string(&log_path) {
        Ok(text) if resume.is_some() => text
            .lines()
            .filter(|l| log_epoch(l).is_some_and(|e| e <= start_epoch))
            .map(|l| format!("{l}\n"))
            .collect(),
        _ => String::new(),
    };
    fs::write(&log_path, kept).map_err(io_err(&log_path))?;
    let mut log = fs::OpenOptions::new().append(true).open(&log_path).map_err(io_err(&log_path))?;

    let best_path = out_dir.join(BEST_CHECKPOINT);
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let mut epochs = Vec::new();
    let mut calibration_ratio = None;
    while !trainer.finished() {
        let m = trainer.run_epoch()?;
        info!("{}", m.log_line());
        if m.epoch == 1 {
            if let (Some(ce), Some(mse)) = (m.train_ce, m.train_mse) {
                let ratio = ce / mse;
                info!("calibration: first-epoch CE/MSE ratio {ratio:.4} (alpha = {})", cfg.alpha);
                calibration_ratio = Some(ratio);
            }
        }
        writeln!(log, "{}", m.log_line()).map_err(io_err(&log_path))?;
        let ckpt = trainer.checkpoint(echo, Some(&norm));
        if m.event == ScheduleEvent::Improved {
            write_checkpoint(&ckpt, &best_path)?;
        }
        write_checkpoint(&ckpt, &last_path)?;
        if m.event == ScheduleEvent::Halved {
            info!("learning rate halved to {:.3e}", trainer.progress.schedule.lr);
        }
        epochs.push(m);
    }
    if epochs.is_empty() {
        warn!("no epochs run: training was already finished at epoch {start_epoch}");
    }
    if !last_path.exists() {
        write_checkpoint(&trainer.checkpoint(echo, Some(&norm)), &last_path)?;
    }
    Ok(TrainSummary {
        epochs,
        best_loss: trainer.progress.schedule.best,
        calibration_ratio,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
    })
}

fn log_epoch(line: &str) -> Option<u64> {
    line.split_whitespace().next()?.strip_prefix("epoch=")?.parse().ok()
}
