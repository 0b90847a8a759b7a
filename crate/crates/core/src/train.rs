//! Training loop, early stopping, checkpoint bookkeeping, and the
//! data-ablation driver.
//!
//! One epoch is a full pass over the training set: a seeded reshuffle into
//! bucketed batches, then forward loss / backward / Adam step per batch.
//! After every epoch the dev set is decoded and scored with corpus BLEU; the
//! best-scoring parameters are kept, and training stops after `patience`
//! epochs without improvement or at `max_epochs`. With fixed seeds the whole
//! run is bit-reproducible, and a run resumed from the last checkpoint
//! continues exactly as the uninterrupted run would have.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    make_batches, prepare_utterance, sample_subset, CorpusError, Level, PreparedUtterance,
    SubsetSpec, Utterance, Vocabulary,
};
use crate::eval::{
    bleu_corpus, evaluate_corpus, EvalError, EvalReport, MatchResources, MeteorParams,
};
use crate::features::FeatureMatrix;
use crate::infer::{translate_features, DecodeMode, InferError};
use crate::model::{forward_loss, init_params, Checkpoint, ModelConfig, ModelError};
use crate::nn::{Adam, AdamConfig, Graph, Mode, NnError, ParameterSet, Tensor};
use crate::sub_seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("dev set is empty")]
    EmptyDevSet,
    #[error("dev utterance {id} has no references")]
    MissingReferences { id: String },
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
        /// Completed epochs before the abort, for post-mortem inspection.
        log: TrainLog,
    },
    #[error("cannot resume from checkpoint: {0}")]
    BadResume(String),
    #[error("train log line {line}: {reason}")]
    BadLog { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Knobs of the optimization run, separate from the model architecture.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Total epoch budget, counted from epoch 1 even when resuming.
    pub max_epochs: usize,
    /// Epochs without a dev-BLEU gain before stopping.
    pub patience: usize,
    /// Master seed for init, shuffles, dropout, and teacher forcing.
    pub seed: u64,
    pub lr: f64,
    /// Decoding used for the per-epoch dev score.
    pub eval_mode: DecodeMode,
    /// Must agree with the model's decoder level.
    pub level: Level,
    /// Token budget per decoded dev hypothesis.
    pub decode_max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 50,
            patience: 5,
            seed: 1,
            lr: 1e-3,
            eval_mode: DecodeMode::Beam,
            level: Level::Word,
            decode_max_len: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.max_epochs == 0 {
            return Err(TrainError::Config("max_epochs must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(TrainError::Config("patience must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(TrainError::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.decode_max_len == 0 {
            return Err(TrainError::Config("decode_max_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// A dev utterance ready for scoring: features to decode plus one or more
/// word-token references.
#[derive(Debug, Clone)]
pub struct DevUtterance {
    pub id: String,
    pub features: FeatureMatrix,
    pub references: Vec<Vec<String>>,
}

/// One epoch of the training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss per target token over the epoch.
    pub loss: f64,
    pub dev_bleu: f64,
    /// Wall-clock seconds; informative only, not covered by the
    /// reproducibility guarantee.
    pub seconds: f64,
    pub tokens_per_sec: f64,
}

/// Per-epoch training records. Epochs are strictly increasing; the loss,
/// dev-BLEU, and epoch columns are deterministic under fixed seeds, while
/// the timing columns measure the actual run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

const LOG_HEADER: &str = "epoch,loss,dev_bleu,seconds,tokens_per_sec";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.loss, r.dev_bleu, r.seconds, r.tokens_per_sec
            ));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self, TrainError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header.trim_end() == LOG_HEADER => {}
            other => {
                return Err(TrainError::BadLog {
                    line: 1,
                    reason: format!(
                        "expected header {LOG_HEADER:?}, got {:?}",
                        other.map(|(_, l)| l).unwrap_or("")
                    ),
                })
            }
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(TrainError::BadLog {
                    line: i + 1,
                    reason: format!("expected 5 fields, got {}", fields.len()),
                });
            }
            let bad = |reason: String| TrainError::BadLog { line: i + 1, reason };
            records.push(EpochRecord {
                epoch: fields[0]
                    .parse()
                    .map_err(|e| bad(format!("epoch: {e}")))?,
                loss: fields[1].parse().map_err(|e| bad(format!("loss: {e}")))?,
                dev_bleu: fields[2]
                    .parse()
                    .map_err(|e| bad(format!("dev_bleu: {e}")))?,
                seconds: fields[3]
                    .parse()
                    .map_err(|e| bad(format!("seconds: {e}")))?,
                tokens_per_sec: fields[4]
                    .parse()
                    .map_err(|e| bad(format!("tokens_per_sec: {e}")))?,
            });
        }
        Ok(TrainLog { records })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse_csv(&text)
    }
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters of the best dev-BLEU epoch, without optimizer state.
    pub best: Checkpoint,
    /// Final parameters plus optimizer state, suitable for resuming.
    pub last: Checkpoint,
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_bleu: f64,
    pub final_bleu: f64,
}

/// The pair of artifacts needed to continue an interrupted run.
#[derive(Debug)]
pub struct Resume {
    /// The `last` checkpoint of the interrupted run (carries `opt.*` state).
    pub last: Checkpoint,
    /// The `best` checkpoint of the interrupted run.
    pub best: Checkpoint,
}

/// Key of the scalar optimizer bookkeeping tensor inside checkpoint extras:
/// [completed epochs, Adam step count, best dev BLEU, best epoch, epochs
/// since improvement].
const OPT_STATE_KEY: &str = "opt.state";

fn adam_config(model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> AdamConfig {
    AdamConfig {
        lr: train_cfg.lr,
        weight_decay: model_cfg.l2,
        ..AdamConfig::default()
    }
}

fn pack_last(
    model_cfg: &ModelConfig,
    vocab_file: &str,
    params: &ParameterSet<f32>,
    opt: &Adam<f32>,
    completed_epochs: usize,
    best_bleu: f64,
    best_epoch: usize,
    since_improve: usize,
) -> Checkpoint {
    // Bookkeeping scalars are stored as f32; epoch and step counts are exact
    // below 2^24, and a rounded best-BLEU bar can only suppress, never
    // invent, later "improvements", which keeps resumed runs loss-identical.
    let state = Tensor::from_vec(
        &[5],
        vec![
            completed_epochs as f32,
            opt.step_count() as f32,
            best_bleu as f32,
            best_epoch as f32,
            since_improve as f32,
        ],
    );
    let mut extras = vec![(OPT_STATE_KEY.to_string(), state)];
    let (m, v) = opt.moments();
    for i in 0..params.len() {
        let name = &params.entry(i).name;
        extras.push((format!("opt.m.{name}"), m[i].clone()));
        extras.push((format!("opt.v.{name}"), v[i].clone()));
    }
    Checkpoint {
        config: model_cfg.clone(),
        vocab_file: vocab_file.to_string(),
        params: params.clone(),
        extras,
    }
}

struct ResumedState {
    opt: Adam<f32>,
    completed_epochs: usize,
    best_bleu: f64,
    best_epoch: usize,
    since_improve: usize,
}

fn unpack_resume(ck: &Checkpoint, cfg: AdamConfig) -> Result<ResumedState, TrainError> {
    let extras: HashMap<&str, &Tensor<f32>> =
        ck.extras.iter().map(|(k, t)| (k.as_str(), t)).collect();
    let state = extras
        .get(OPT_STATE_KEY)
        .ok_or_else(|| TrainError::BadResume(format!("missing {OPT_STATE_KEY} tensor")))?;
    if state.len() != 5 {
        return Err(TrainError::BadResume(format!(
            "{OPT_STATE_KEY} should have 5 entries, found {}",
            state.len()
        )));
    }
    let mut m = Vec::with_capacity(ck.params.len());
    let mut v = Vec::with_capacity(ck.params.len());
    for i in 0..ck.params.len() {
        let entry = ck.params.entry(i);
        for (prefix, dst) in [("m", &mut m), ("v", &mut v)] {
            let key = format!("opt.{prefix}.{}", entry.name);
            let t = *extras
                .get(key.as_str())
                .ok_or_else(|| TrainError::BadResume(format!("missing {key} tensor")))?;
            if t.shape() != entry.value.shape() {
                return Err(TrainError::BadResume(format!(
                    "{key} shape {:?} does not match parameter shape {:?}",
                    t.shape(),
                    entry.value.shape()
                )));
            }
            dst.push(t.clone());
        }
    }
    let s = state.data();
    Ok(ResumedState {
        opt: Adam::from_state(cfg, s[1] as u64, m, v),
        completed_epochs: s[0] as usize,
        best_bleu: s[2] as f64,
        best_epoch: s[3] as usize,
        since_improve: s[4] as usize,
    })
}

/// Decodes every dev utterance with the given parameters.
fn decode_dev(
    dev: &[DevUtterance],
    params: &ParameterSet<f32>,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    mode: DecodeMode,
    max_len: usize,
) -> Result<Vec<Vec<String>>, TrainError> {
    dev.iter()
        .map(|d| {
            let (tokens, _) = translate_features(&d.features, params, cfg, vocab, mode, max_len)?;
            Ok(tokens)
        })
        .collect()
}

fn dev_references(dev: &[DevUtterance]) -> Result<Vec<Vec<Vec<String>>>, TrainError> {
    dev.iter()
        .map(|d| {
            if d.references.is_empty() {
                Err(TrainError::MissingReferences { id: d.id.clone() })
            } else {
                Ok(d.references.clone())
            }
        })
        .collect()
}

/// Corpus BLEU of the given parameters on the dev set.
pub fn dev_bleu(
    dev: &[DevUtterance],
    params: &ParameterSet<f32>,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    mode: DecodeMode,
    max_len: usize,
) -> Result<f64, TrainError> {
    if dev.is_empty() {
        return Err(TrainError::EmptyDevSet);
    }
    let refs = dev_references(dev)?;
    let hyps = decode_dev(dev, params, cfg, vocab, mode, max_len)?;
    Ok(bleu_corpus(&hyps, &refs, 4)?.score)
}

/// Scores a saved checkpoint on the dev set.
pub fn evaluate_dev(
    dev: &[DevUtterance],
    checkpoint: &Checkpoint,
    vocab: &Vocabulary,
    mode: DecodeMode,
    max_len: usize,
) -> Result<f64, TrainError> {
    dev_bleu(dev, &checkpoint.params, &checkpoint.config, vocab, mode, max_len)
}

/// Runs the full training loop and returns the best and last checkpoints
/// together with the per-epoch log.
///
/// `vocab_file` is a label recorded in the checkpoints (typically the path
/// of the vocabulary file the model was built against). Pass `resume` to
/// continue an interrupted run: epochs keep their global numbering and the
/// epoch budget stays `max_epochs` in total, so the continuation reproduces
/// the uninterrupted run bit for bit under the same seeds.
#[allow(clippy::too_many_arguments)]
pub fn train_loop(
    train: &[PreparedUtterance],
    dev: &[DevUtterance],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    vocab: &Vocabulary,
    vocab_file: &str,
    resume: Option<Resume>,
) -> Result<TrainOutcome, TrainError> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if train_cfg.level != model_cfg.decoder_level {
        return Err(TrainError::Config(format!(
            "train level {} does not match model decoder level {}",
            train_cfg.level, model_cfg.decoder_level
        )));
    }
    if train.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    if dev.is_empty() {
        return Err(TrainError::EmptyDevSet);
    }
    dev_references(dev)?;

    let adam_cfg = adam_config(model_cfg, train_cfg);
    let (mut params, mut opt, start_epoch, mut best_params, mut best_bleu, mut best_epoch, mut since_improve);
    match resume {
        None => {
            params = init_params::<f32>(model_cfg, train_cfg.seed)?;
            opt = Adam::new(adam_cfg, &params);
            start_epoch = 1;
            best_params = params.clone();
            best_bleu = f64::NEG_INFINITY;
            best_epoch = 0;
            since_improve = 0;
        }
        Some(r) => {
            let state = unpack_resume(&r.last, adam_cfg)?;
            params = r.last.params;
            opt = state.opt;
            start_epoch = state.completed_epochs + 1;
            best_params = r.best.params;
            best_bleu = state.best_bleu;
            best_epoch = state.best_epoch;
            since_improve = state.since_improve;
        }
    }

    let mut log = TrainLog::default();
    let mut final_bleu = f64::NAN;
    let mut last_epoch = start_epoch.saturating_sub(1);

    for epoch in start_epoch..=train_cfg.max_epochs {
        let started = Instant::now();
        let shuffle_seed = sub_seed(train_cfg.seed, &format!("shuffle-{epoch}"));
        let batches = make_batches(train, model_cfg.max_batch, shuffle_seed);

        let mut loss_sum = 0.0;
        let mut token_sum = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            // Exploding updates surface as non-finite parameters after an
            // optimizer step (or in a corrupt resume checkpoint); catch them
            // before the forward pass, which could only echo them as NaN.
            if (0..params.len()).any(|i| !params.entry(i).value.all_finite()) {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: bi,
                    loss: f64::NAN,
                    log,
                });
            }
            let mut g = Graph::<f32>::new();
            let loss_seed = sub_seed(train_cfg.seed, &format!("epoch-{epoch}-batch-{bi}"));
            let loss = forward_loss(&mut g, batch, &params, model_cfg, Mode::Train, loss_seed)?;
            let loss_val = f64::from(g.value(loss).item());
            if !loss_val.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: bi,
                    loss: loss_val,
                    log,
                });
            }
            let tokens: usize = batch.target_lengths.iter().sum();
            loss_sum += loss_val * tokens as f64;
            token_sum += tokens;
            g.backward_into(loss, &mut params)?;
            opt.step(&mut params)?;
        }
        let epoch_loss = loss_sum / token_sum as f64;

        let bleu = dev_bleu(
            dev,
            &params,
            model_cfg,
            vocab,
            train_cfg.eval_mode,
            train_cfg.decode_max_len,
        )?;
        let seconds = started.elapsed().as_secs_f64();
        log.records.push(EpochRecord {
            epoch,
            loss: epoch_loss,
            dev_bleu: bleu,
            seconds,
            tokens_per_sec: token_sum as f64 / seconds.max(1e-9),
        });
        final_bleu = bleu;
        last_epoch = epoch;

        // On ties keep the later epoch's parameters: when BLEU plateaus
        // (saturated or stuck at zero on a hard dev set), the more-trained
        // model is the useful artifact. Patience still demands a strict gain.
        if bleu >= best_bleu {
            best_params = params.clone();
            best_epoch = epoch;
        }
        if bleu > best_bleu {
            best_bleu = bleu;
            since_improve = 0;
        } else {
            since_improve += 1;
            if since_improve >= train_cfg.patience {
                break;
            }
        }
    }

    let best = Checkpoint {
        config: model_cfg.clone(),
        vocab_file: vocab_file.to_string(),
        params: best_params,
        extras: Vec::new(),
    };
    let last = pack_last(
        model_cfg,
        vocab_file,
        &params,
        &opt,
        last_epoch,
        best_bleu,
        best_epoch,
        since_improve,
    );
    Ok(TrainOutcome {
        best,
        last,
        log,
        best_epoch,
        best_bleu,
        final_bleu,
    })
}

/// Counts word occurrences over the first (training) translation of each
/// utterance, as needed by the frequency-bucket analysis.
pub fn word_counts(utts: &[Utterance]) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for utt in utts {
        if let Some(tokens) = utt.translations.first() {
            for tok in tokens {
                *counts.entry(tok.clone()).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// Scoring configuration shared by evaluation entry points.
#[derive(Debug, Clone, Default)]
pub struct EvalSettings {
    pub meteor: MeteorParams,
    pub resources: MatchResources,
}

/// One row of the data-ablation table.
#[derive(Debug)]
pub struct AblationRow {
    pub fraction: f64,
    /// Audio hours actually included in the subset.
    pub hours: f64,
    pub utterances: usize,
    pub outcome: Result<AblationOutcome, String>,
}

/// Successful ablation run: the dev-set report of the best checkpoint.
#[derive(Debug)]
pub struct AblationOutcome {
    pub report: EvalReport,
    pub best_bleu: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Trains one model per corpus fraction on nested subsets and evaluates each
/// best checkpoint on the fixed dev set.
///
/// All runs share the same hyperparameters, vocabulary, and seeds; subsets
/// are nested, so a smaller fraction's utterances are a prefix of a larger
/// one's. A failure in one fraction is recorded in its row and the remaining
/// fractions still run. `load` materializes the feature matrix for one
/// corpus utterance.
#[allow(clippy::too_many_arguments)]
pub fn ablate(
    corpus: &[Utterance],
    dev: &[DevUtterance],
    fractions: &[f64],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    vocab: &Vocabulary,
    vocab_file: &str,
    settings: &EvalSettings,
    load: impl Fn(&Utterance) -> Result<FeatureMatrix, TrainError>,
) -> Result<Vec<AblationRow>, TrainError> {
    if fractions.is_empty() {
        return Err(TrainError::Config("no ablation fractions given".into()));
    }
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(TrainError::Config(format!(
                "ablation fractions must lie in (0, 1], got {f}"
            )));
        }
    }
    if corpus.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    if dev.is_empty() {
        return Err(TrainError::EmptyDevSet);
    }

    let total_hours: f64 = corpus.iter().map(Utterance::duration_secs).sum::<f64>() / 3600.0;
    let subset_seed = sub_seed(train_cfg.seed, "ablation-subset");
    let mut rows = Vec::with_capacity(fractions.len());

    for &fraction in fractions {
        let spec = SubsetSpec {
            target_hours: fraction * total_hours,
            seed: subset_seed,
            nested: true,
        };
        let subset = match sample_subset(corpus, &spec) {
            Ok(s) => s,
            Err(e) => {
                rows.push(AblationRow {
                    fraction,
                    hours: 0.0,
                    utterances: 0,
                    outcome: Err(e.to_string()),
                });
                continue;
            }
        };
        let hours = subset.iter().map(Utterance::duration_secs).sum::<f64>() / 3600.0;
        let utterances = subset.len();

        let outcome = run_fraction(
            &subset, dev, model_cfg, train_cfg, vocab, vocab_file, settings, &load,
        )
        .map_err(|e| e.to_string());
        rows.push(AblationRow {
            fraction,
            hours,
            utterances,
            outcome,
        });
    }
    Ok(rows)
}

#[allow(clippy::too_many_arguments)]
fn run_fraction(
    subset: &[Utterance],
    dev: &[DevUtterance],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    vocab: &Vocabulary,
    vocab_file: &str,
    settings: &EvalSettings,
    load: &impl Fn(&Utterance) -> Result<FeatureMatrix, TrainError>,
) -> Result<AblationOutcome, TrainError> {
    let prepared: Vec<PreparedUtterance> = subset
        .iter()
        .map(|u| Ok(prepare_utterance(u, load(u)?, vocab)))
        .collect::<Result<_, TrainError>>()?;
    let run = train_loop(&prepared, dev, model_cfg, train_cfg, vocab, vocab_file, None)?;

    let hyps = decode_dev(
        dev,
        &run.best.params,
        model_cfg,
        vocab,
        train_cfg.eval_mode,
        train_cfg.decode_max_len,
    )?;
    let refs = dev_references(dev)?;
    let counts = word_counts(subset);
    let report = evaluate_corpus(&hyps, &refs, &counts, &settings.meteor, &settings.resources)?;
    Ok(AblationOutcome {
        report,
        best_bleu: run.best_bleu,
        best_epoch: run.best_epoch,
        epochs_run: run.log.records.len(),
    })
}
