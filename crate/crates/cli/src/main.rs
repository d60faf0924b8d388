use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use selfspk::backend::{read_embeddings, read_scores, read_trials, write_embeddings, write_scores, BackendConfig, BackendError};
use selfspk::corpus::{read_archive, read_manifest, synth_generate, write_archive, write_manifest, Corpus, CorpusError};
use selfspk::experiment::{
    all_pairs_trials, evaluate, extract_embeddings, fit_backend, score_trials, trials_to_text, ConfigError, ExperimentConfig,
    PipelineError,
};
use selfspk::metrics::MetricsError;
use selfspk::model::{read_checkpoint, CheckpointError};
use selfspk::sampler::Variant;
use selfspk::trainer::{train_run, Mode, TrainError};

#[derive(Parser)]
#[command(name = "selfspk", version, about = "Self-supervised speaker embeddings: synthesis, training, extraction and scoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantFlag {
    Cln,
    Ctx,
    Same,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus archive and its manifest.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Archive path; the manifest goes to `<out>.manifest`. With an
        /// [eval] section, `<stem>.eval.sspk`, its manifest and an all-pairs
        /// trial list are written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a corpus archive.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        /// Replaces the configured variant with the given flags.
        #[arg(long, value_enum)]
        variant: Vec<VariantFlag>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write one embedding per utterance of a corpus.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the backend on labelled training embeddings and score trials.
    Score {
        #[arg(long)]
        train_embeddings: PathBuf,
        /// Manifest giving the speaker labels of the training embeddings.
        #[arg(long)]
        train_manifest: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Experiment configuration supplying the [backend] section.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print EER and minDCF of a score file against a trial key.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        key: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::InvalidSpec(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numeric() {
            return CliError::Numeric(e.to_string());
        }
        match e {
            TrainError::Config(_) | TrainError::Sample(_) => CliError::Config(e.to_string()),
            TrainError::Model(selfspk::model::ModelError::Config(_)) => CliError::Config(e.to_string()),
            TrainError::Corpus(c) => c.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Singular(_) | BackendError::Collapse { .. } | BackendError::NonFinite(_) => {
                CliError::Numeric(e.to_string())
            }
            BackendError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.is_numeric() {
            return CliError::Numeric(e.to_string());
        }
        match e {
            PipelineError::Train(t) => t.into(),
            PipelineError::Corpus(c) => c.into(),
            PipelineError::Backend(b) => b.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("cannot write {}: {e}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn summary(label: &str, speakers: usize, corpus: &Corpus) -> String {
    let labelled = corpus.utterances().iter().filter(|u| u.is_labelled()).count();
    format!(
        "{label}: speakers={speakers} utterances={} frames={} labelled_speakers={} labelled_utterances={labelled}",
        corpus.len(),
        corpus.total_frames(),
        corpus.speakers().len(),
    )
}

fn synth(config: &Path, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let (mut cfg, _) = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.synth.seed = s;
    }
    let corpus = synth_generate(&cfg.synth)?;
    write_archive(&corpus, out)?;
    write_manifest(&corpus.manifest(), with_suffix(out, ".manifest"))?;
    println!("{}", summary("train", cfg.synth.speakers, &corpus));
    if let Some(spec) = cfg.eval_synth() {
        let eval = synth_generate(&spec)?;
        let stem = out.with_extension("");
        let eval_path = with_suffix(&stem, ".eval.sspk");
        write_archive(&eval, &eval_path)?;
        write_manifest(&eval.manifest(), with_suffix(&eval_path, ".manifest"))?;
        let trials_path = with_suffix(&stem, ".eval.trials");
        let trials = all_pairs_trials(&eval.manifest());
        std::fs::write(&trials_path, trials_to_text(&trials)).map_err(|e| io_error(&trials_path, e))?;
        println!("{}", summary("eval", spec.speakers, &eval));
        println!("trials={} ({})", trials.len(), trials_path.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: &Path,
    corpus_path: &Path,
    out: &Path,
    seed: Option<u64>,
    mode: Option<Mode>,
    variant: &[VariantFlag],
    resume: Option<&Path>,
) -> Result<(), CliError> {
    let (mut cfg, mut echo) = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
        echo.push_str(&format!("\n# override: --seed {s}\n"));
    }
    if let Some(m) = mode {
        cfg.train.mode = m;
        echo.push_str(&format!("\n# override: --mode {m}\n"));
    }
    if !variant.is_empty() {
        let mut v = Variant { cln: false, ctx: false, same: false };
        for flag in variant {
            match flag {
                VariantFlag::Cln => v.cln = true,
                VariantFlag::Ctx => v.ctx = true,
                VariantFlag::Same => v.same = true,
            }
        }
        cfg.train.variant = v;
        echo.push_str(&format!("\n# override: variant {}\n", v.label()));
    }
    let corpus = read_archive(corpus_path)?;
    let ckpt = resume.map(read_checkpoint).transpose()?;
    let summary = train_run(&corpus, &cfg.train, &cfg.model, out, &echo, ckpt.as_ref())?;
    for m in &summary.epochs {
        info!("{}", m.log_line());
    }
    if let Some(r) = summary.calibration_ratio {
        println!("calibration ce/mse={r:.4}");
    }
    println!(
        "epochs={} best_val_loss={:.6e} best={} last={}",
        summary.epochs.len(),
        summary.best_loss,
        summary.best_checkpoint.display(),
        summary.last_checkpoint.display()
    );
    Ok(())
}

fn extract(checkpoint: &Path, corpus_path: &Path, out: &Path) -> Result<(), CliError> {
    let ckpt = read_checkpoint(checkpoint)?;
    let norm = ckpt
        .norm
        .clone()
        .ok_or_else(|| CliError::Data(format!("{} carries no feature normalization", checkpoint.display())))?;
    let net = ckpt.network().map_err(|e| CliError::Data(e.to_string()))?.encoder_only();
    let corpus = read_archive(corpus_path)?;
    let table = extract_embeddings(&net, &norm, &corpus)?;
    write_embeddings(&table, out)?;
    println!("embeddings={} dim={}", table.rows.len(), table.dim().unwrap_or(0));
    Ok(())
}

fn score(
    train_embeddings: &Path,
    train_manifest: &Path,
    embeddings: &Path,
    trials: &Path,
    out: &Path,
    config: Option<&Path>,
) -> Result<(), CliError> {
    let backend_cfg = match config {
        Some(p) => ExperimentConfig::load(p)?.0.backend,
        None => BackendConfig::default(),
    };
    let train_table = read_embeddings(train_embeddings)?;
    let manifest = read_manifest(train_manifest)?;
    let backend = fit_backend(&train_table, &manifest, &backend_cfg)?;
    let table = read_embeddings(embeddings)?;
    let trial_list = read_trials(trials)?;
    let scores = score_trials(&backend, &table, &trial_list).map_err(|e| match e {
        PipelineError::UnknownId { line, id } => {
            CliError::Data(format!("{} line {line}: unknown utterance id {id}", trials.display()))
        }
        other => other.into(),
    })?;
    write_scores(&scores, out)?;
    println!("scored {} trials", scores.len());
    Ok(())
}

fn eval(scores: &Path, key: &Path) -> Result<(), CliError> {
    let scores = read_scores(scores)?;
    let key = read_trials(key)?;
    let (eer, min_dcf) = evaluate(&scores, &key)?;
    println!("EER={eer:.4}% minDCF={min_dcf:.4}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { config, seed, out } => synth(&config, seed, &out),
        Command::Train { config, corpus, out, seed, mode, variant, resume } => {
            train(&config, &corpus, &out, seed, mode, &variant, resume.as_deref())
        }
        Command::Extract { checkpoint, corpus, out } => extract(&checkpoint, &corpus, &out),
        Command::Score { train_embeddings, train_manifest, embeddings, trials, out, config } => {
            score(&train_embeddings, &train_manifest, &embeddings, &trials, &out, config.as_deref())
        }
        Command::Eval { scores, key } => eval(&scores, &key),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
