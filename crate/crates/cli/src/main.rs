//! Subcommand dispatch for the speech-translation pipeline.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::collections::HashMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use s2t_cli::{emit_metrics_table, parse_config, render_config, ConfigError, MetricsRow, RunConfig};
use s2t_core::corpus::{
    prepare_utterance, read_manifest, synth_corpus, write_manifest, PreparedUtterance,
    SynthConfig, Utterance, Vocabulary,
};
use s2t_core::eval::{evaluate_corpus, EquivTable, MatchResources};
use s2t_core::features::{
    compute_deltas, extract_filterbank, read_features, read_wav, stack_features, write_features,
};
use s2t_core::infer::{batch_translate, read_translations, write_translations};
use s2t_core::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelConfig};
use s2t_core::train::{
    ablate, train_loop, DevUtterance, EvalSettings, Resume, TrainError, TrainLog,
};

#[derive(Parser)]
#[command(
    name = "s2t",
    about = "Speech-to-text translation pipeline: features, vocabulary, training, decoding, metrics",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args)]
struct Common {
    /// key=value config file (defaults apply when omitted)
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run directory for outputs and the resolved-config echo
    #[arg(long, value_name = "DIR", default_value = "run")]
    out: PathBuf,
    /// Master seed (shorthand for setting train.seed and synth.seed)
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Override one config key, e.g. --set model.beam=1 (repeatable; beats the file)
    #[arg(long, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Convert WAV files from a manifest into filterbank feature files
    PrepareFeatures {
        #[command(flatten)]
        common: Common,
        /// Manifest whose `features` entries are WAV paths under --audio-root
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        /// Directory the manifest's WAV paths are relative to
        #[arg(long, value_name = "DIR", default_value = ".")]
        audio_root: PathBuf,
    },
    /// Build a token vocabulary from the training manifest's translations
    BuildVocab {
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic train/dev corpus with word-coded features
    SynthCorpus {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes best/last checkpoints and the epoch log
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this run directory's last.ckpt/best.ckpt
        #[arg(long)]
        resume: bool,
    },
    /// Decode a manifest with a trained checkpoint into hypotheses JSONL
    Translate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to decode with (default: <out>/best.ckpt)
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Score hypotheses against the dev manifest's references
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Hypotheses JSONL (default: <out>/hyps.jsonl)
        #[arg(long, value_name = "PATH")]
        hyps: Option<PathBuf>,
    },
    /// Train on nested corpus fractions and emit the metrics table
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

macro_rules! runtime_from {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_from!(
    s2t_core::corpus::CorpusError,
    s2t_core::features::FeatureError,
    s2t_core::model::ModelError,
    s2t_core::infer::InferError,
    s2t_core::eval::EvalError,
    TrainError
);

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli.command) {
        Ok(()) => {}
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::PrepareFeatures {
            common,
            manifest,
            audio_root,
        } => {
            let (cfg, out) = resolve(&common)?;
            cmd_prepare_features(&cfg, &out, &manifest, &audio_root)
        }
        Command::BuildVocab { common } => {
            let (cfg, out) = resolve(&common)?;
            cmd_build_vocab(&cfg, &out)
        }
        Command::SynthCorpus { common } => {
            let (cfg, out) = resolve(&common)?;
            cmd_synth_corpus(&cfg, &out)
        }
        Command::Train { common, resume } => {
            let (cfg, out) = resolve(&common)?;
            cmd_train(&cfg, &out, resume)
        }
        Command::Translate { common, checkpoint } => {
            let (cfg, out) = resolve(&common)?;
            let ck = checkpoint.unwrap_or_else(|| out.join("best.ckpt"));
            cmd_translate(&cfg, &out, &ck)
        }
        Command::Evaluate { common, hyps } => {
            let (cfg, out) = resolve(&common)?;
            let hyps = hyps.unwrap_or_else(|| out.join("hyps.jsonl"));
            cmd_evaluate(&cfg, &out, &hyps)
        }
        Command::Ablate { common } => {
            let (cfg, out) = resolve(&common)?;
            cmd_ablate(&cfg, &out)
        }
    }
}

/// Parses the config stack, creates the run directory, and echoes the
/// resolved configuration into it.
fn resolve(common: &Common) -> Result<(RunConfig, PathBuf), CliError> {
    let mut overrides = Vec::new();
    if let Some(seed) = common.seed {
        overrides.push(("train.seed".to_string(), seed.to_string()));
        overrides.push(("synth.seed".to_string(), seed.to_string()));
    }
    for entry in &common.set {
        match entry.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => {
                overrides.push((k.trim().to_string(), v.trim().to_string()));
            }
            _ => {
                return Err(CliError::Usage(format!(
                    "--set expects KEY=VALUE, got {entry:?}"
                )))
            }
        }
    }
    let cfg = parse_config(common.config.as_deref(), &overrides)?;
    std::fs::create_dir_all(&common.out).map_err(|e| io_ctx(&common.out, e))?;
    let echo = common.out.join("config.resolved");
    std::fs::write(&echo, render_config(&cfg)).map_err(|e| io_ctx(&echo, e))?;
    Ok((cfg, common.out.clone()))
}

fn io_ctx(path: &Path, e: impl Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocabulary, CliError> {
    let path = Path::new(&cfg.paths.vocab);
    Vocabulary::read(path, cfg.train.level).map_err(|e| io_ctx(path, e))
}

/// The model config actually used at run time: vocab_size derived from the
/// vocabulary file when the config leaves it at 0.
fn resolved_model(cfg: &RunConfig, vocab: &Vocabulary) -> Result<ModelConfig, CliError> {
    let mut model = cfg.model.clone();
    if model.vocab_size == 0 {
        model.vocab_size = vocab.size();
    } else if model.vocab_size != vocab.size() {
        return Err(CliError::Usage(format!(
            "model.vocab_size ({}) does not match the vocabulary ({} entries); \
             leave it at 0 to derive it",
            model.vocab_size,
            vocab.size()
        )));
    }
    model.validate()?;
    Ok(model)
}

fn manifest_utts(path_str: &str) -> Result<Vec<Utterance>, CliError> {
    let path = Path::new(path_str);
    read_manifest(path).map_err(|e| io_ctx(path, e))
}

fn load_dev(cfg: &RunConfig) -> Result<Vec<DevUtterance>, CliError> {
    let root = Path::new(&cfg.paths.feature_root);
    manifest_utts(&cfg.paths.dev_manifest)?
        .into_iter()
        .map(|u| {
            let fpath = root.join(&u.features);
            let features = read_features(&fpath).map_err(|e| io_ctx(&fpath, e))?;
            Ok(DevUtterance {
                id: u.id,
                features,
                references: u.translations,
            })
        })
        .collect()
}

fn load_resources(cfg: &RunConfig) -> Result<MatchResources, CliError> {
    let table = |path_str: &str| -> Result<Option<EquivTable>, CliError> {
        if path_str.is_empty() {
            return Ok(None);
        }
        let path = Path::new(path_str);
        EquivTable::read(path).map(Some).map_err(|e| io_ctx(path, e))
    };
    Ok(MatchResources {
        synonyms: table(&cfg.paths.synonyms)?,
        paraphrases: table(&cfg.paths.paraphrases)?,
    })
}

fn variant_label(cfg: &RunConfig) -> String {
    format!(
        "{}-{}-{}",
        cfg.train.level, cfg.model.enc_direction, cfg.train.eval_mode
    )
}

fn cmd_prepare_features(
    cfg: &RunConfig,
    out: &Path,
    manifest: &Path,
    audio_root: &Path,
) -> Result<(), CliError> {
    let utts = read_manifest(manifest).map_err(|e| io_ctx(manifest, e))?;
    let feat_dir = out.join("features");
    std::fs::create_dir_all(&feat_dir).map_err(|e| io_ctx(&feat_dir, e))?;

    let mut prepared = Vec::with_capacity(utts.len());
    for utt in utts {
        let wav_path = audio_root.join(&utt.features);
        let signal = read_wav(&wav_path).map_err(|e| io_ctx(&wav_path, e))?;
        let mut feats = extract_filterbank(&signal, &cfg.frontend)?;
        if cfg.prepare.deltas {
            let deltas = compute_deltas(&feats, cfg.prepare.delta_window)?;
            feats = stack_features(&feats, &deltas)?;
        }
        let name = format!("{}.feat", utt.id);
        let fpath = feat_dir.join(&name);
        write_features(&fpath, &feats).map_err(|e| io_ctx(&fpath, e))?;
        prepared.push(Utterance {
            n_frames: feats.n_frames(),
            features: name,
            ..utt
        });
    }
    let manifest_out = out.join("manifest.jsonl");
    write_manifest(&manifest_out, &prepared).map_err(|e| io_ctx(&manifest_out, e))?;
    println!(
        "prepared {} utterances -> {} (features under {})",
        prepared.len(),
        manifest_out.display(),
        feat_dir.display()
    );
    Ok(())
}

fn cmd_build_vocab(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let utts = manifest_utts(&cfg.paths.train_manifest)?;
    let sequences: Vec<Vec<String>> = utts
        .iter()
        .filter_map(|u| u.translations.first().cloned())
        .collect();
    let vocab = Vocabulary::build(&sequences, cfg.vocab.min_count, cfg.train.level)?;
    let path = out.join("vocab.txt");
    vocab.write(&path).map_err(|e| io_ctx(&path, e))?;
    println!(
        "built {} vocabulary: {} entries -> {}",
        cfg.train.level,
        vocab.size(),
        path.display()
    );
    Ok(())
}

fn cmd_synth_corpus(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let s = &cfg.synth;
    let synth_cfg = SynthConfig {
        n_utts: s.n_utts + s.dev_utts,
        vocab_size: s.vocab_size,
        len_range: (s.len_min, s.len_max),
        n_mels: cfg.model.n_mels,
        frames_per_word: (s.frames_per_word_min, s.frames_per_word_max),
        noise: s.noise,
        seed: s.seed,
    };
    let synth = synth_corpus(&synth_cfg)?;
    let feat_dir = out.join("features");
    std::fs::create_dir_all(&feat_dir).map_err(|e| io_ctx(&feat_dir, e))?;

    let mut utts = Vec::with_capacity(synth.len());
    for u in &synth {
        let name = format!("{}.feat", u.id);
        let fpath = feat_dir.join(&name);
        write_features(&fpath, &u.features).map_err(|e| io_ctx(&fpath, e))?;
        utts.push(Utterance {
            id: u.id.clone(),
            features: name,
            n_frames: u.features.n_frames(),
            translations: vec![u.tokens.clone()],
        });
    }
    let (train, dev) = utts.split_at(s.n_utts);
    let train_path = out.join("train.jsonl");
    let dev_path = out.join("dev.jsonl");
    write_manifest(&train_path, train).map_err(|e| io_ctx(&train_path, e))?;
    write_manifest(&dev_path, dev).map_err(|e| io_ctx(&dev_path, e))?;
    let hours = |us: &[Utterance]| us.iter().map(Utterance::duration_secs).sum::<f64>() / 3600.0;
    println!(
        "synthesized {} train ({:.4} h) + {} dev utterances -> {}, {}",
        train.len(),
        hours(train),
        dev.len(),
        train_path.display(),
        dev_path.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: &Path, resume: bool) -> Result<(), CliError> {
    let vocab = load_vocab(cfg)?;
    let model_cfg = resolved_model(cfg, &vocab)?;
    let root = Path::new(&cfg.paths.feature_root);
    let train_utts = manifest_utts(&cfg.paths.train_manifest)?;
    let prepared: Vec<PreparedUtterance> = train_utts
        .iter()
        .map(|u| {
            let fpath = root.join(&u.features);
            let features = read_features(&fpath).map_err(|e| io_ctx(&fpath, e))?;
            Ok(prepare_utterance(u, features, &vocab))
        })
        .collect::<Result<_, CliError>>()?;
    let dev = load_dev(cfg)?;

    let log_path = out.join("train_log.csv");
    let mut history = TrainLog::default();
    let resume_state = if resume {
        let last_path = out.join("last.ckpt");
        let best_path = out.join("best.ckpt");
        if log_path.is_file() {
            history = TrainLog::read(&log_path)?;
        }
        Some(Resume {
            last: load_checkpoint(&last_path).map_err(|e| io_ctx(&last_path, e))?,
            best: load_checkpoint(&best_path).map_err(|e| io_ctx(&best_path, e))?,
        })
    } else {
        None
    };

    let outcome = match train_loop(
        &prepared,
        &dev,
        &model_cfg,
        &cfg.train,
        &vocab,
        &cfg.paths.vocab,
        resume_state,
    ) {
        Ok(o) => o,
        Err(TrainError::Diverged {
            epoch,
            batch,
            loss,
            log,
        }) => {
            history.records.extend(log.records);
            let _ = history.write(&log_path);
            return Err(CliError::Runtime(format!(
                "training diverged at epoch {epoch}, batch {batch}: loss {loss} \
                 (completed epochs logged to {})",
                log_path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };

    let best_path = out.join("best.ckpt");
    let last_path = out.join("last.ckpt");
    save_checkpoint(&best_path, &outcome.best).map_err(|e| io_ctx(&best_path, e))?;
    save_checkpoint(&last_path, &outcome.last).map_err(|e| io_ctx(&last_path, e))?;
    let new_epochs = outcome.log.records.len();
    history.records.extend(outcome.log.records);
    history.write(&log_path)?;
    println!(
        "trained {} epochs: best dev BLEU {:.2} at epoch {}, final {:.2} -> {}",
        new_epochs,
        outcome.best_bleu,
        outcome.best_epoch,
        outcome.final_bleu,
        best_path.display()
    );
    Ok(())
}

fn checkpoint_vocab(cfg: &RunConfig, ck: &Checkpoint) -> Result<Vocabulary, CliError> {
    let path = Path::new(&cfg.paths.vocab);
    let vocab = Vocabulary::read(path, ck.config.decoder_level).map_err(|e| io_ctx(path, e))?;
    if vocab.size() != ck.config.vocab_size {
        return Err(CliError::Runtime(format!(
            "vocabulary {} has {} entries but the checkpoint was trained with {} \
             (trained against {})",
            path.display(),
            vocab.size(),
            ck.config.vocab_size,
            ck.vocab_file
        )));
    }
    Ok(vocab)
}

fn cmd_translate(cfg: &RunConfig, out: &Path, ck_path: &Path) -> Result<(), CliError> {
    let ck = load_checkpoint(ck_path).map_err(|e| io_ctx(ck_path, e))?;
    let vocab = checkpoint_vocab(cfg, &ck)?;
    let utts = manifest_utts(&cfg.paths.dev_manifest)?;
    let results = batch_translate(
        &utts,
        Path::new(&cfg.paths.feature_root),
        &ck.params,
        &ck.config,
        &vocab,
        cfg.train.eval_mode,
        cfg.train.decode_max_len,
    );
    let failed = results.iter().filter(|(_, r)| r.is_err()).count();
    let hyp_path = out.join("hyps.jsonl");
    write_translations(&hyp_path, &results).map_err(|e| io_ctx(&hyp_path, e))?;
    println!(
        "translated {} utterances ({} failed) with {} decoding -> {}",
        results.len(),
        failed,
        cfg.train.eval_mode,
        hyp_path.display()
    );
    Ok(())
}

/// Pairs hypotheses with manifest references by utterance id, demanding an
/// exact one-to-one cover.
fn align_refs(
    hyps: &[(String, Vec<String>)],
    utts: &[Utterance],
    manifest: &str,
) -> Result<Vec<Vec<Vec<String>>>, CliError> {
    let mut by_id: HashMap<&str, &Utterance> = utts.iter().map(|u| (u.id.as_str(), u)).collect();
    let mut refs = Vec::with_capacity(hyps.len());
    for (id, _) in hyps {
        let utt = by_id.remove(id.as_str()).ok_or_else(|| {
            CliError::Runtime(format!(
                "hypothesis utterance {id} is missing from {manifest} (or listed twice)"
            ))
        })?;
        refs.push(utt.translations.clone());
    }
    if let Some(id) = by_id.into_keys().next() {
        return Err(CliError::Runtime(format!(
            "{manifest} utterance {id} has no hypothesis"
        )));
    }
    Ok(refs)
}

fn cmd_evaluate(cfg: &RunConfig, out: &Path, hyp_path: &Path) -> Result<(), CliError> {
    let hyps = read_translations(hyp_path).map_err(|e| io_ctx(hyp_path, e))?;
    let dev_utts = manifest_utts(&cfg.paths.dev_manifest)?;
    let refs = align_refs(&hyps, &dev_utts, &cfg.paths.dev_manifest)?;
    let train_utts = manifest_utts(&cfg.paths.train_manifest)?;
    let counts = s2t_core::train::word_counts(&train_utts);
    let resources = load_resources(cfg)?;

    let hyp_tokens: Vec<Vec<String>> = hyps.into_iter().map(|(_, t)| t).collect();
    let report = evaluate_corpus(&hyp_tokens, &refs, &counts, &cfg.metric, &resources)?;

    let report_path = out.join("report.json");
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(&report_path, json).map_err(|e| io_ctx(&report_path, e))?;
    println!(
        "BLEU {:.2} (BP {:.3}) | METEOR {:.4} | precision {:.2} | recall {:.2} (staged) {:.2} (exact) -> {}",
        report.bleu,
        report.bp,
        report.meteor,
        report.precision_unigram,
        report.recall_staged,
        report.recall_exact,
        report_path.display()
    );
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let vocab = load_vocab(cfg)?;
    let model_cfg = resolved_model(cfg, &vocab)?;
    let corpus = manifest_utts(&cfg.paths.train_manifest)?;
    let dev = load_dev(cfg)?;
    let settings = EvalSettings {
        meteor: cfg.metric.clone(),
        resources: load_resources(cfg)?,
    };
    let root = PathBuf::from(&cfg.paths.feature_root);
    let rows = ablate(
        &corpus,
        &dev,
        &cfg.ablate.fractions,
        &model_cfg,
        &cfg.train,
        &vocab,
        &cfg.paths.vocab,
        &settings,
        |u| {
            read_features(&root.join(&u.features))
                .map_err(|e| TrainError::Infer(e.into()))
        },
    )?;

    let variant = variant_label(cfg);
    let mut table_rows = Vec::new();
    for row in &rows {
        match &row.outcome {
            Ok(o) => {
                println!(
                    "fraction {:.4}: {} utterances, {:.4} h, best BLEU {:.2} at epoch {} ({} epochs)",
                    row.fraction, row.utterances, row.hours, o.best_bleu, o.best_epoch, o.epochs_run
                );
                table_rows.push(MetricsRow {
                    hours: row.hours,
                    variant: variant.clone(),
                    report: &o.report,
                });
            }
            Err(e) => eprintln!("fraction {:.4} failed: {e}", row.fraction),
        }
    }
    if table_rows.is_empty() {
        return Err(CliError::Runtime(
            "every ablation fraction failed; no metrics to emit".into(),
        ));
    }
    let csv_path = out.join("metrics.csv");
    std::fs::write(&csv_path, emit_metrics_table(&table_rows)).map_err(|e| io_ctx(&csv_path, e))?;
    println!(
        "wrote {} of {} fraction rows -> {}",
        table_rows.len(),
        rows.len(),
        csv_path.display()
    );
    Ok(())
}
