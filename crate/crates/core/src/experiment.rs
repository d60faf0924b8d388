//! Configuration and glue from corpus generation to verification metrics.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendConfig, BackendError, EmbeddingTable, ScoredTrial, Trial, TrialKey};
use crate::corpus::{synth_generate, Corpus, CorpusError, CorpusManifest, NormStats, SynthSpec};
use crate::metrics::{eer, min_dcf_default, MetricsError};
use crate::model::{ModelConfig, ModelError, SpeakerNet};
use crate::trainer::{train_run, TrainConfig, TrainError, TrainSummary};

/// Held-out speakers drawn from the same population as the training corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub speakers: usize,
    pub utterances_per_speaker: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { speakers: 16, utterances_per_speaker: 10 }
    }
}

/// Everything one run needs, read from a TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub synth: SynthSpec,
    pub eval: Option<EvalSpec>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub backend: BackendConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Parse(String),
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String), ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Ok((Self::parse(&text)?, text))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Spec of the evaluation corpus: same generator, the next block of
    /// speaker indices, every utterance labelled.
    pub fn eval_synth(&self) -> Option<SynthSpec> {
        self.eval.map(|e| SynthSpec {
            speakers: e.speakers,
            first_speaker: self.synth.first_speaker + self.synth.speakers as u32,
            utterances_per_speaker: e.utterances_per_speaker,
            labelled_fraction: 1.0,
            ..self.synth.clone()
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("corpus has {found} features per frame but the model expects {expected}")]
    FeatureDim { expected: usize, found: usize },
    #[error("line {line}: unknown utterance id {id}")]
    UnknownId { line: usize, id: String },
    #[error("score for trial {enrol} {test} is missing")]
    MissingScore { enrol: String, test: String },
    #[error("{0}")]
    Data(String),
}

impl PipelineError {
    pub fn is_numeric(&self) -> bool {
        match self {
            PipelineError::Train(e) => e.is_numeric(),
            PipelineError::Model(ModelError::NonFinite { .. }) => true,
            PipelineError::Backend(
                BackendError::Singular(_) | BackendError::Collapse { .. } | BackendError::NonFinite(_),
            ) => true,
            _ => false,
        }
    }
}

/// One embedding per utterance over its full augmented channel, in
/// inference mode, after the training normalization.
pub fn extract_embeddings(net: &SpeakerNet<f32>, norm: &NormStats, corpus: &Corpus) -> Result<EmbeddingTable, PipelineError> {
    let expected = net.config().feat_dim;
    if corpus.feat_dim() != expected || norm.dim() != expected {
        return Err(PipelineError::FeatureDim { expected, found: corpus.feat_dim() });
    }
    let normalized = corpus.normalized(norm);
    let rows = normalized
        .utterances()
        .iter()
        .map(|u| Ok((u.id().to_owned(), net.embed(u.augmented())?)))
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(EmbeddingTable { rows })
}

/// Every unordered pair of utterances, keyed by speaker identity.
pub fn all_pairs_trials(manifest: &CorpusManifest) -> Vec<Trial> {
    let e = &manifest.entries;
    let mut trials = Vec::new();
    for i in 0..e.len() {
        for j in i + 1..e.len() {
            let key = match (e[i].speaker, e[j].speaker) {
                (Some(a), Some(b)) if a == b => TrialKey::Target,
                (Some(_), Some(_)) => TrialKey::Nontarget,
                _ => TrialKey::Unknown,
            };
            trials.push(Trial { enrol: e[i].id.clone(), test: e[j].id.clone(), key, line: trials.len() + 1 });
        }
    }
    trials
}

pub fn trials_to_text(trials: &[Trial]) -> String {
    trials
        .iter()
        .map(|t| {
            let key = match t.key {
                TrialKey::Target => "target",
                TrialKey::Nontarget => "nontarget",
                TrialKey::Unknown => "unknown",
            };
            format!("{} {} {key}\n", t.enrol, t.test)
        })
        .collect()
}

fn vector(v: &[f32]) -> DVector<f64> {
    DVector::from_iterator(v.len(), v.iter().map(|&x| x as f64))
}

/// Fits the backend on the embeddings of labelled manifest entries.
pub fn fit_backend(
    table: &EmbeddingTable,
    manifest: &CorpusManifest,
    cfg: &BackendConfig,
) -> Result<Backend, PipelineError> {
    let index = table.index();
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        let Some(s) = e.speaker else { continue };
        let row = index.get(e.id.as_str()).ok_or_else(|| PipelineError::UnknownId { line: i + 1, id: e.id.clone() })?;
        x.push(vector(&table.rows[*row].1));
        labels.push(s);
    }
    if x.is_empty() {
        return Err(PipelineError::Data("no labelled embeddings to train the backend".into()));
    }
    Ok(Backend::fit(&x, &labels, cfg)?.0)
}

/// Scores every trial; an unknown id names the trial's line.
pub fn score_trials(backend: &Backend, table: &EmbeddingTable, trials: &[Trial]) -> Result<Vec<ScoredTrial>, PipelineError> {
    let index = table.index();
    let mut cache: HashMap<usize, DVector<f64>> = HashMap::new();
    let mut lookup = |id: &str, line: usize| -> Result<DVector<f64>, PipelineError> {
        let row = *index.get(id).ok_or_else(|| PipelineError::UnknownId { line, id: id.to_owned() })?;
        if let Some(v) = cache.get(&row) {
            return Ok(v.clone());
        }
        let v = backend.transform(&vector(&table.rows[row].1))?;
        cache.insert(row, v.clone());
        Ok(v)
    };
    let mut scores = Vec::with_capacity(trials.len());
    for t in trials {
        let a = lookup(&t.enrol, t.line)?;
        let b = lookup(&t.test, t.line)?;
        scores.push(ScoredTrial { enrol: t.enrol.clone(), test: t.test.clone(), score: backend.plda.score(&a, &b)? });
    }
    Ok(scores)
}

/// EER (%) and minDCF (P(tar) = 0.01) of scores against a key.
pub fn evaluate(scores: &[ScoredTrial], key: &[Trial]) -> Result<(f64, f64), PipelineError> {
    let lookup: HashMap<(&str, &str), f64> =
        scores.iter().map(|s| ((s.enrol.as_str(), s.test.as_str()), s.score)).collect();
    let (mut target, mut nontarget) = (Vec::new(), Vec::new());
    for t in key {
        let dest = match t.key {
            TrialKey::Target => &mut target,
            TrialKey::Nontarget => &mut nontarget,
            TrialKey::Unknown => continue,
        };
        let s = lookup
            .get(&(t.enrol.as_str(), t.test.as_str()))
            .ok_or_else(|| PipelineError::MissingScore { enrol: t.enrol.clone(), test: t.test.clone() })?;
        dest.push(*s);
    }
    Ok((eer(&target, &nontarget)?, min_dcf_default(&target, &nontarget)?))
}

/// Outcome of [`run_experiment`].
#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub eer: f64,
    pub min_dcf: f64,
    pub train: Option<TrainSummary>,
}

/// Generates both corpora, trains into `out_dir`, then scores all
/// evaluation pairs with a backend fitted on the labelled training
/// utterances. With `epochs = 0` the untrained encoder is evaluated.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentResult, PipelineError> {
    let eval_spec = cfg.eval_synth().ok_or_else(|| PipelineError::Data("configuration has no [eval] section".into()))?;
    let train_corpus = synth_generate(&cfg.synth)?;
    let eval_corpus = synth_generate(&eval_spec)?;
    let echo = cfg.to_toml();
    let (net, norm, summary) = if cfg.train.max_epochs == 0 {
        let norm = crate::corpus::compute_global_norm(&train_corpus)?;
        let normalized = train_corpus.normalized(&norm);
        let trainer = crate::trainer::Trainer::new(&normalized, cfg.train.clone(), &cfg.model)?;
        (trainer.net, norm, None)
    } else {
        let summary = train_run(&train_corpus, &cfg.train, &cfg.model, out_dir, &echo, None)?;
        let path = if summary.best_checkpoint.exists() { &summary.best_checkpoint } else { &summary.last_checkpoint };
        let ckpt = crate::model::read_checkpoint(path).map_err(TrainError::from)?;
        let norm = ckpt.norm.clone().expect("training writes normalization");
        (ckpt.network()?, norm, Some(summary))
    };
    let train_table = extract_embeddings(&net, &norm, &train_corpus)?;
    let backend = fit_backend(&train_table, &train_corpus.manifest(), &cfg.backend)?;
    let eval_table = extract_embeddings(&net, &norm, &eval_corpus)?;
    let trials = all_pairs_trials(&eval_corpus.manifest());
    let scores = score_trials(&backend, &eval_table, &trials)?;
    let (eer, min_dcf) = evaluate(&scores, &trials)?;
    Ok(ExperimentResult { eer, min_dcf, train: summary })
}
