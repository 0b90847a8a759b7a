//! End-to-end tests of the `s2t` binary: exit codes, config resolution,
//! and the full synth → vocab → train → translate → evaluate → ablate
//! pipeline on a miniature corpus.

use std::path::Path;
use std::process::{Command, Output};

fn s2t() -> Command {
    Command::new(env!("CARGO_BIN_EXE_s2t"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    s2t()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn s2t binary")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn assert_code(out: &Output, want: i32, what: &str) {
    assert_eq!(
        out.status.code(),
        Some(want),
        "{what}: expected exit {want}\nstdout:\n{}\nstderr:\n{}",
        stdout(out),
        stderr(out),
    );
}

fn read(path: impl AsRef<Path>) -> String {
    let path = path.as_ref();
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

/// Small-model overrides that make training fast enough for a test while
/// exercising every pipeline stage. All artifact paths live under `run_dir`
/// (relative to the process working directory).
fn tiny_sets(run_dir: &str) -> Vec<String> {
    let pairs = [
        ("model.n_mels".to_string(), "4".to_string()),
        ("model.cnn_layers".into(), "1".into()),
        ("model.cnn_filters".into(), "3".into()),
        ("model.enc_layers".into(), "1".into()),
        ("model.enc_hidden".into(), "5".into()),
        ("model.dec_layers".into(), "1".into()),
        ("model.dec_hidden".into(), "5".into()),
        ("model.emb_dim".into(), "4".into()),
        ("model.dropout".into(), "0.1".into()),
        ("model.beam".into(), "2".into()),
        ("model.max_batch".into(), "4".into()),
        ("train.max_epochs".into(), "6".into()),
        ("train.patience".into(), "50".into()),
        ("train.lr".into(), "0.02".into()),
        ("train.eval_mode".into(), "greedy".into()),
        ("train.decode_max_len".into(), "10".into()),
        ("synth.n_utts".into(), "12".into()),
        ("synth.dev_utts".into(), "3".into()),
        ("synth.vocab_size".into(), "6".into()),
        ("synth.len_min".into(), "4".into()),
        ("synth.len_max".into(), "6".into()),
        ("synth.frames_per_word_min".into(), "4".into()),
        ("synth.frames_per_word_max".into(), "6".into()),
        ("synth.noise".into(), "0.05".into()),
        ("paths.train_manifest".into(), format!("{run_dir}/train.jsonl")),
        ("paths.dev_manifest".into(), format!("{run_dir}/dev.jsonl")),
        ("paths.feature_root".into(), format!("{run_dir}/features")),
        ("paths.vocab".into(), format!("{run_dir}/vocab.txt")),
    ];
    let mut args: Vec<String> = pairs
        .iter()
        .flat_map(|(k, v)| ["--set".to_string(), format!("{k}={v}")])
        .collect();
    args.push("--out".into());
    args.push(run_dir.into());
    args
}

/// Runs one subcommand with the tiny overrides plus `extra` arguments.
fn run_tiny(cmd: &str, run_dir: &str, extra: &[&str], dir: &Path) -> Output {
    let mut args: Vec<String> = vec![cmd.to_string()];
    args.extend(tiny_sets(run_dir));
    args.extend(extra.iter().map(|s| s.to_string()));
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    run(&argv, dir)
}

#[test]
fn no_arguments_is_a_usage_error() {
    let out = s2t().output().expect("spawn");
    assert_code(&out, 1, "bare invocation");
    let msg = stderr(&out);
    assert!(msg.contains("Usage"), "no usage text:\n{msg}");
}

#[test]
fn unknown_subcommands_and_flags_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["frobnicate"], tmp.path());
    assert_code(&out, 1, "unknown subcommand");
    let out = run(&["train", "--bogus-flag"], tmp.path());
    assert_code(&out, 1, "unknown flag");
}

#[test]
fn help_and_version_exit_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["--help"], tmp.path());
    assert_code(&out, 0, "--help");
    assert!(stdout(&out).contains("synth-corpus"));
    let out = run(&["--version"], tmp.path());
    assert_code(&out, 0, "--version");
}

#[test]
fn unknown_config_keys_are_rejected_by_name() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(
        &["synth-corpus", "--set", "model.dropuot=0.3", "--out", "run"],
        tmp.path(),
    );
    assert_code(&out, 1, "misspelled key");
    assert!(
        stderr(&out).contains("model.dropuot"),
        "error does not name the key:\n{}",
        stderr(&out)
    );
}

#[test]
fn bad_config_values_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(
        &["synth-corpus", "--set", "model.dropout=purple", "--out", "run"],
        tmp.path(),
    );
    assert_code(&out, 1, "non-numeric dropout");
    assert!(stderr(&out).contains("model.dropout"));

    let out = run(
        &["synth-corpus", "--set", "model.dropout=1.5", "--out", "run"],
        tmp.path(),
    );
    assert_code(&out, 1, "out-of-range dropout");
}

#[test]
fn malformed_set_arguments_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(
        &["synth-corpus", "--set", "model.dropout", "--out", "run"],
        tmp.path(),
    );
    assert_code(&out, 1, "--set without '='");
}

#[test]
fn flags_beat_the_config_file_which_beats_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("run.cfg");
    std::fs::write(&cfg_path, "model.beam=2\nmodel.dropout=0.25\n").unwrap();

    let out = run(
        &[
            "synth-corpus",
            "--config",
            "run.cfg",
            "--set",
            "model.beam=1",
            "--out",
            "run",
        ],
        tmp.path(),
    );
    assert_code(&out, 0, "synth-corpus with config file");

    let resolved = read(tmp.path().join("run/config.resolved"));
    assert!(resolved.contains("model.beam=1\n"), "flag should win:\n{resolved}");
    assert!(
        resolved.contains("model.dropout=0.25\n"),
        "file should beat default:\n{resolved}"
    );
    assert!(
        resolved.contains("model.n_mels=80\n"),
        "untouched keys keep defaults:\n{resolved}"
    );
}

#[test]
fn seed_flag_sets_both_seed_keys_but_yields_to_explicit_sets() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(
        &["synth-corpus", "--seed", "7", "--out", "run"],
        tmp.path(),
    );
    assert_code(&out, 0, "--seed run");
    let resolved = read(tmp.path().join("run/config.resolved"));
    assert!(resolved.contains("train.seed=7\n"), "{resolved}");
    assert!(resolved.contains("synth.seed=7\n"), "{resolved}");

    let out = run(
        &[
            "synth-corpus",
            "--seed",
            "7",
            "--set",
            "synth.seed=9",
            "--out",
            "run2",
        ],
        tmp.path(),
    );
    assert_code(&out, 0, "--seed with explicit override");
    let resolved = read(tmp.path().join("run2/config.resolved"));
    assert!(resolved.contains("train.seed=7\n"), "{resolved}");
    assert!(resolved.contains("synth.seed=9\n"), "{resolved}");
}

#[test]
fn config_file_syntax_errors_carry_the_line_number() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("bad.cfg");
    std::fs::write(&cfg_path, "model.beam=2\nthis line has no equals\n").unwrap();
    let out = run(
        &["synth-corpus", "--config", "bad.cfg", "--out", "run"],
        tmp.path(),
    );
    assert_code(&out, 1, "syntax error");
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

/// The full pipeline on a synthetic corpus: every stage must exit 0 and
/// leave its documented artifacts behind.
#[test]
fn pipeline_runs_end_to_end_on_a_synthetic_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let run_dir = dir.join("run");

    // synth-corpus: manifests plus one feature file per utterance.
    let out = run_tiny("synth-corpus", "run", &[], dir);
    assert_code(&out, 0, "synth-corpus");
    assert!(run_dir.join("train.jsonl").is_file());
    assert!(run_dir.join("dev.jsonl").is_file());
    assert_eq!(read(run_dir.join("train.jsonl")).lines().count(), 12);
    assert_eq!(read(run_dir.join("dev.jsonl")).lines().count(), 3);
    let n_feats = std::fs::read_dir(run_dir.join("features")).unwrap().count();
    assert_eq!(n_feats, 15, "one feature file per utterance");

    // build-vocab: one token per line.
    let out = run_tiny("build-vocab", "run", &[], dir);
    assert_code(&out, 0, "build-vocab");
    let vocab = read(run_dir.join("vocab.txt"));
    assert!(vocab.lines().count() >= 2, "vocab has entries:\n{vocab}");

    // train: checkpoints plus a parseable epoch log.
    let out = run_tiny("train", "run", &[], dir);
    assert_code(&out, 0, "train");
    assert!(run_dir.join("best.ckpt").is_file());
    assert!(run_dir.join("last.ckpt").is_file());
    let log = read(run_dir.join("train_log.csv"));
    assert!(
        log.starts_with("epoch,loss,dev_bleu,seconds,tokens_per_sec\n"),
        "log header:\n{log}"
    );
    assert_eq!(log.lines().count(), 1 + 6, "header plus one row per epoch");

    // translate: one hypothesis record per dev utterance.
    let out = run_tiny("translate", "run", &[], dir);
    assert_code(&out, 0, "translate");
    let hyps = read(run_dir.join("hyps.jsonl"));
    assert_eq!(hyps.lines().count(), 3, "hypothesis rows:\n{hyps}");

    // evaluate: a JSON report with the headline metrics.
    let out = run_tiny("evaluate", "run", &[], dir);
    assert_code(&out, 0, "evaluate");
    let report: serde_json::Value =
        serde_json::from_str(&read(run_dir.join("report.json"))).expect("report parses");
    for key in ["bleu", "meteor", "precision_unigram", "recall_staged", "recall_exact"] {
        assert!(
            report.get(key).and_then(|v| v.as_f64()).is_some(),
            "report.json missing numeric {key}"
        );
    }
    assert!(stdout(&out).contains("BLEU"), "{}", stdout(&out));

    // Resume: two more epochs append to the same log.
    let out = run_tiny(
        "train",
        "run",
        &["--resume", "--set", "train.max_epochs=8"],
        dir,
    );
    assert_code(&out, 0, "resumed train");
    let log = read(run_dir.join("train_log.csv"));
    assert_eq!(log.lines().count(), 1 + 8, "resume extends the log");

    // ablate: metrics table sorted by hours, one row per fraction. The
    // fraction models train from scratch, so give them enough epochs to
    // produce non-empty hypotheses.
    let out = run_tiny(
        "ablate",
        "run",
        &[
            "--set",
            "ablate.fractions=0.5,1",
            "--set",
            "train.max_epochs=12",
            "--set",
            "train.lr=0.02",
            "--set",
            "model.max_batch=2",
        ],
        dir,
    );
    assert_code(&out, 0, "ablate");
    let table = read(run_dir.join("metrics.csv"));
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(
        lines[0], "hours,bleu,meteor,precision,recall_staged,recall_exact,variant",
        "metrics header"
    );
    assert_eq!(lines.len(), 3, "header plus two fraction rows:\n{table}");
    let hours: Vec<f64> = lines[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(hours[0] < hours[1], "rows sorted by hours: {hours:?}");
    assert!(
        lines[1].ends_with("word-bi-greedy"),
        "variant label:\n{table}"
    );
}

#[test]
fn evaluate_with_a_missing_hypothesis_file_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    // A valid corpus so only the hypothesis file is missing.
    let out = run_tiny("synth-corpus", "run", &[], dir);
    assert_code(&out, 0, "synth-corpus");

    let out = run_tiny(
        "evaluate",
        "run",
        &["--hyps", "nowhere/missing.jsonl"],
        dir,
    );
    assert_code(&out, 2, "missing hyps file");
    assert!(
        stderr(&out).contains("missing.jsonl"),
        "error names the path:\n{}",
        stderr(&out)
    );
}

#[test]
fn train_without_a_vocabulary_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["train", "--out", "run"], tmp.path());
    assert_code(&out, 2, "missing vocab file");
    assert!(
        stderr(&out).contains("vocab.txt"),
        "error names the path:\n{}",
        stderr(&out)
    );
}

#[test]
fn every_subcommand_echoes_the_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(
        &["synth-corpus", "--out", "echo-run", "--set", "model.beam=3"],
        tmp.path(),
    );
    assert_code(&out, 0, "synth-corpus");
    let resolved = read(tmp.path().join("echo-run/config.resolved"));
    let mut keys: Vec<&str> = resolved
        .lines()
        .map(|l| l.split('=').next().unwrap())
        .collect();
    let sorted = {
        let mut s = keys.clone();
        s.sort_unstable();
        s
    };
    assert_eq!(keys, sorted, "echo is sorted by key");
    keys.dedup();
    assert_eq!(keys.len(), resolved.lines().count(), "no duplicate keys");
    assert!(resolved.contains("model.beam=3\n"), "{resolved}");
}

#[test]
fn identical_invocations_produce_identical_artifacts() {
    // Same arguments, two different working directories: every artifact
    // (including the checkpoints, which record the vocab path verbatim)
    // must come out byte-identical.
    let tmp_a = tempfile::tempdir().unwrap();
    let tmp_b = tempfile::tempdir().unwrap();

    for dir in [tmp_a.path(), tmp_b.path()] {
        for cmd in ["synth-corpus", "build-vocab", "train"] {
            let out = run_tiny(cmd, "run", &[], dir);
            assert_code(&out, 0, cmd);
        }
    }

    let log_a = read(tmp_a.path().join("run/train_log.csv"));
    let log_b = read(tmp_b.path().join("run/train_log.csv"));
    let strip = |log: &str| -> Vec<String> {
        // Timing columns vary run to run; the learned trajectory must not.
        log.lines()
            .map(|l| l.split(',').take(3).collect::<Vec<_>>().join(","))
            .collect()
    };
    assert_eq!(strip(&log_a), strip(&log_b), "loss/BLEU trajectories differ");

    let best_a = std::fs::read(tmp_a.path().join("run/best.ckpt")).unwrap();
    let best_b = std::fs::read(tmp_b.path().join("run/best.ckpt")).unwrap();
    assert_eq!(best_a, best_b, "best checkpoints differ byte-for-byte");
}

#[test]
fn checkpoint_flag_lets_translate_use_the_last_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    for cmd in ["synth-corpus", "build-vocab", "train"] {
        let out = run_tiny(cmd, "run", &[], dir);
        assert_code(&out, 0, cmd);
    }
    let out = run_tiny("translate", "run", &["--checkpoint", "run/last.ckpt"], dir);
    assert_code(&out, 0, "translate --checkpoint");
    assert!(dir.join("run/hyps.jsonl").is_file());
}
