//! Greedy and beam decoding from encoder states to token sequences, plus
//! batch translation with JSON-lines output.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Batch, Utterance, Vocabulary, EOS_ID, SOS_ID};
use crate::features::{read_features, FeatureError, FeatureMatrix};
use crate::model::{
    decode_step, encode, init_decoder_state, DecoderState, EncoderStates, ModelConfig, ModelError,
    ModelNodes,
};
use crate::nn::{Graph, Mode, NodeId, ParameterSet, Scalar};

#[derive(Debug, Error)]
pub enum InferError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("{0}")]
    InvalidArg(String),
}

/// How to pick tokens at each decode step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Beam,
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecodeMode::Greedy => "greedy",
            DecodeMode::Beam => "beam",
        })
    }
}

impl std::str::FromStr for DecodeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "greedy" => Ok(DecodeMode::Greedy),
            "beam" => Ok(DecodeMode::Beam),
            other => Err(format!("unknown decode mode `{other}` (greedy|beam)")),
        }
    }
}

/// One (possibly partial) decode: emitted tokens (SOS never included, the
/// terminating EOS not included), their cumulative log-probability (the EOS
/// step's log-probability is included when EOS ended the sequence), the
/// recurrent state that would consume the next token, and whether decoding
/// has ended (EOS emitted or the length budget hit).
#[derive(Clone)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub state: DecoderState,
    pub finished: bool,
}

/// Log-softmax of a single-row logits node, in double precision.
fn log_probs<F: Scalar>(g: &Graph<F>, logits: NodeId) -> Vec<f64> {
    let row: Vec<f64> = g.value(logits).data().iter().map(|v| v.as_f64()).collect();
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
    let log_z = m + z.ln();
    row.into_iter().map(|x| x - log_z).collect()
}

fn check_lens(beam: usize, max_len: usize) -> Result<(), InferError> {
    if beam == 0 {
        return Err(InferError::InvalidArg("beam must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(InferError::InvalidArg("max_len must be at least 1".into()));
    }
    Ok(())
}

/// Argmax decoding: one token per step (ties take the lowest id), stopping at
/// EOS or after `max_len` tokens.
pub fn greedy_decode<F: Scalar>(
    g: &mut Graph<F>,
    enc: &EncoderStates,
    nodes: &ModelNodes,
    cfg: &ModelConfig,
    max_len: usize,
) -> Result<Hypothesis, InferError> {
    check_lens(1, max_len)?;
    let mut state = init_decoder_state(g, cfg, 1);
    let mut tokens = Vec::new();
    let mut logprob = 0.0;
    let mut prev = SOS_ID;
    for _ in 0..max_len {
        let out = decode_step(g, &[prev], &state, enc, nodes, cfg, None)?;
        state = out.state;
        let lp = log_probs(g, out.logits);
        let tok = g.value(out.logits).argmax_rows()[0];
        logprob += lp[tok];
        if tok == EOS_ID {
            return Ok(Hypothesis {
                tokens,
                logprob,
                state,
                finished: true,
            });
        }
        tokens.push(tok);
        prev = tok;
    }
    Ok(Hypothesis {
        tokens,
        logprob,
        state,
        finished: true,
    })
}

/// Orders hypotheses best-first: higher log-probability wins, equal scores
/// fall back to the lexicographically smaller token sequence.
fn best_first(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.logprob
        .total_cmp(&a.logprob)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Standard beam search: every live hypothesis is expanded over the full
/// vocabulary, the top `beam` candidates by cumulative log-probability are
/// kept (ties to the lexicographically smallest sequence), and candidates
/// that chose EOS move to the completed pool instead of occupying live
/// slots. Returns up to `beam` completed hypotheses, best first. Scores are
/// raw log-probabilities; there is no length normalization.
pub fn beam_nbest<F: Scalar>(
    g: &mut Graph<F>,
    enc: &EncoderStates,
    nodes: &ModelNodes,
    cfg: &ModelConfig,
    beam: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>, InferError> {
    check_lens(beam, max_len)?;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        state: init_decoder_state(g, cfg, 1),
        finished: false,
    }];
    let mut completed: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        // Every continuation of a live hypothesis scores strictly below it,
        // so once the completed pool's top `beam` all beat the best live
        // score nothing can change the answer.
        if completed.len() >= beam {
            completed.sort_by(best_first);
            completed.truncate(beam);
            let worst_kept = completed.last().expect("non-empty").logprob;
            let best_live = live
                .iter()
                .map(|h| h.logprob)
                .fold(f64::NEG_INFINITY, f64::max);
            if best_live <= worst_kept {
                break;
            }
        }
        let mut candidates = Vec::with_capacity(live.len() * cfg.vocab_size);
        for hyp in &live {
            let prev = *hyp.tokens.last().unwrap_or(&SOS_ID);
            let out = decode_step(g, &[prev], &hyp.state, enc, nodes, cfg, None)?;
            let lp = log_probs(g, out.logits);
            for (tok, &tok_lp) in lp.iter().enumerate() {
                let mut tokens = hyp.tokens.clone();
                let finished = tok == EOS_ID;
                if !finished {
                    tokens.push(tok);
                }
                candidates.push(Hypothesis {
                    tokens,
                    logprob: hyp.logprob + tok_lp,
                    state: out.state.clone(),
                    finished,
                });
            }
        }
        candidates.sort_by(best_first);
        candidates.truncate(beam);
        live.clear();
        for cand in candidates {
            if cand.finished {
                completed.push(cand);
            } else {
                live.push(cand);
            }
        }
    }
    for mut hyp in live {
        hyp.finished = true;
        completed.push(hyp);
    }
    completed.sort_by(best_first);
    completed.truncate(beam);
    Ok(completed)
}

/// The best completed hypothesis from [`beam_nbest`].
pub fn beam_decode<F: Scalar>(
    g: &mut Graph<F>,
    enc: &EncoderStates,
    nodes: &ModelNodes,
    cfg: &ModelConfig,
    beam: usize,
    max_len: usize,
) -> Result<Hypothesis, InferError> {
    let mut nbest = beam_nbest(g, enc, nodes, cfg, beam, max_len)?;
    Ok(nbest.remove(0))
}

/// Recomputes a hypothesis's log-probability by re-running the decoder over
/// its tokens (plus the terminal EOS step when EOS ended it).
pub fn hypothesis_logprob<F: Scalar>(
    g: &mut Graph<F>,
    enc: &EncoderStates,
    nodes: &ModelNodes,
    cfg: &ModelConfig,
    hyp: &Hypothesis,
    max_len: usize,
) -> Result<f64, InferError> {
    let ends_with_eos = hyp.finished && hyp.tokens.len() < max_len;
    let mut state = init_decoder_state(g, cfg, 1);
    let mut prev = SOS_ID;
    let mut total = 0.0;
    let mut choices: Vec<usize> = hyp.tokens.clone();
    if ends_with_eos {
        choices.push(EOS_ID);
    }
    for tok in choices {
        let out = decode_step(g, &[prev], &state, enc, nodes, cfg, None)?;
        total += log_probs(g, out.logits)[tok];
        state = out.state;
        prev = tok;
    }
    Ok(total)
}

/// Encoder states for one utterance's features (evaluation mode).
pub fn encode_utterance<F: Scalar>(
    g: &mut Graph<F>,
    feats: &FeatureMatrix,
    nodes: &ModelNodes,
    cfg: &ModelConfig,
) -> Result<EncoderStates, InferError> {
    let batch = Batch {
        ids: vec![String::new()],
        features: feats.values().to_vec(),
        n_mels: feats.n_mels(),
        t_max: feats.n_frames(),
        feature_lengths: vec![feats.n_frames()],
        targets: Vec::new(),
        l_max: 0,
        target_lengths: vec![0],
        bucket_id: 0,
    };
    Ok(encode(g, &batch, nodes, cfg, Mode::Eval, 0)?)
}

/// One utterance's decode: the emitted tokens rendered as vocabulary units,
/// regrouped into words, and the hypothesis score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Translation {
    pub id: String,
    pub tokens: Vec<String>,
    pub text: String,
    pub logprob: f64,
}

/// Decodes an utterance's features into words under the given vocabulary.
pub fn translate_features(
    feats: &FeatureMatrix,
    params: &ParameterSet<f32>,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    mode: DecodeMode,
    max_len: usize,
) -> Result<(Vec<String>, f64), InferError> {
    let mut g: Graph<f32> = Graph::new();
    let nodes = ModelNodes::place(&mut g, params, cfg)?;
    let enc = encode_utterance(&mut g, feats, &nodes, cfg)?;
    let hyp = match mode {
        DecodeMode::Greedy => greedy_decode(&mut g, &enc, &nodes, cfg, max_len)?,
        DecodeMode::Beam => beam_decode(&mut g, &enc, &nodes, cfg, cfg.beam, max_len)?,
    };
    Ok((vocab.decode(&hyp.tokens), hyp.logprob))
}

/// Translates every utterance, resolving feature paths against
/// `feature_root`. A missing or unreadable feature file yields an error entry
/// for that utterance; the run continues. Results preserve input order.
pub fn batch_translate(
    utts: &[Utterance],
    feature_root: &Path,
    params: &ParameterSet<f32>,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    mode: DecodeMode,
    max_len: usize,
) -> Vec<(String, Result<Translation, InferError>)> {
    utts.iter()
        .map(|utt| {
            let outcome = read_features(&feature_root.join(&utt.features))
                .map_err(InferError::from)
                .and_then(|feats| {
                    let (words, logprob) =
                        translate_features(&feats, params, cfg, vocab, mode, max_len)?;
                    Ok(Translation {
                        id: utt.id.clone(),
                        text: words.join(" "),
                        tokens: words,
                        logprob,
                    })
                });
            (utt.id.clone(), outcome)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct TranslationRecord {
    id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    logprob: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// Writes translation outcomes as JSON lines, one utterance per line in the
/// given order; failed utterances carry an `error` field instead of tokens.
pub fn write_translations(
    path: &Path,
    results: &[(String, Result<Translation, InferError>)],
) -> std::io::Result<()> {
    let mut out = String::new();
    for (id, res) in results {
        let record = match res {
            Ok(t) => TranslationRecord {
                id: id.clone(),
                tokens: Some(t.tokens.clone()),
                text: Some(t.text.clone()),
                logprob: Some(t.logprob),
                error: None,
            },
            Err(e) => TranslationRecord {
                id: id.clone(),
                tokens: None,
                text: None,
                logprob: None,
                error: Some(e.to_string()),
            },
        };
        out.push_str(&serde_json::to_string(&record).expect("serializable"));
        out.push('\n');
    }
    std::fs::write(path, out)
}

/// Reads translations written by [`write_translations`], skipping error
/// entries. Returns `(id, tokens)` pairs in file order.
pub fn read_translations(path: &Path) -> std::io::Result<Vec<(String, Vec<String>)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: TranslationRecord = serde_json::from_str(line).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{} line {}: {e}", path.display(), i + 1),
            )
        })?;
        if let Some(tokens) = record.tokens {
            out.push((record.id, tokens));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Level, PAD_ID, UNK_ID};
    use crate::features::write_features;
    use crate::model::init_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(vocab: usize) -> ModelConfig {
        ModelConfig {
            n_mels: 5,
            cnn_filters: 3,
            enc_layers: 1,
            enc_hidden: 4,
            dec_layers: 1,
            dec_hidden: 4,
            emb_dim: 4,
            vocab_size: vocab,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn random_feats(cfg: &ModelConfig, frames: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..frames * cfg.n_mels)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect();
        FeatureMatrix::from_rows(values, cfg.n_mels, 10)
    }

    struct Decoder {
        cfg: ModelConfig,
        params: ParameterSet<f32>,
        feats: FeatureMatrix,
    }

    impl Decoder {
        fn random(vocab: usize, seed: u64) -> Self {
            let cfg = tiny_cfg(vocab);
            let params = init_params(&cfg, seed).unwrap();
            let feats = random_feats(&cfg, 9, seed ^ 0xfeed);
            Decoder { cfg, params, feats }
        }

        fn with_graph<R>(
            &self,
            f: impl FnOnce(&mut Graph<f32>, &EncoderStates, &ModelNodes, &ModelConfig) -> R,
        ) -> R {
            let mut g = Graph::new();
            let nodes = ModelNodes::place(&mut g, &self.params, &self.cfg).unwrap();
            let enc = encode_utterance(&mut g, &self.feats, &nodes, &self.cfg).unwrap();
            f(&mut g, &enc, &nodes, &self.cfg)
        }
    }

    #[test]
    fn an_eos_first_model_decodes_to_the_empty_sequence() {
        let mut d = Decoder::random(8, 1);
        let bias = d.params.get_mut("out.b").unwrap();
        bias.data_mut()[EOS_ID] = 25.0;
        let hyp = d.with_graph(|g, enc, nodes, cfg| greedy_decode(g, enc, nodes, cfg, 10).unwrap());
        assert!(hyp.tokens.is_empty());
        assert!(hyp.finished);
        assert!(hyp.logprob < 0.0);
    }

    #[test]
    fn greedy_is_deterministic() {
        let d = Decoder::random(9, 2);
        let a = d.with_graph(|g, enc, nodes, cfg| greedy_decode(g, enc, nodes, cfg, 12).unwrap());
        let b = d.with_graph(|g, enc, nodes, cfg| greedy_decode(g, enc, nodes, cfg, 12).unwrap());
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.logprob, b.logprob);
    }

    #[test]
    fn constant_logits_follow_the_bias_argmax_path() {
        // With the output weights zeroed the logits equal the output bias at
        // every step, so greedy must emit the bias argmax until max_len.
        let mut d = Decoder::random(7, 3);
        let w = d.params.get_mut("out.w").unwrap();
        w.data_mut().fill(0.0);
        let b = d.params.get_mut("out.b").unwrap();
        b.data_mut().fill(0.0);
        b.data_mut()[4] = 2.0;
        b.data_mut()[5] = 1.0;
        let hyp = d.with_graph(|g, enc, nodes, cfg| greedy_decode(g, enc, nodes, cfg, 3).unwrap());
        assert_eq!(hyp.tokens, vec![4, 4, 4]);
        assert!(hyp.finished);
        // Per-step log-probability of token 4 under softmax([0,0,0,0,2,1,0]).
        let z: f64 = [0.0f64, 0.0, 0.0, 0.0, 2.0, 1.0, 0.0]
            .iter()
            .map(|x| x.exp())
            .sum();
        let step = 2.0 - z.ln();
        assert!((hyp.logprob - 3.0 * step).abs() < 1e-5);
    }

    #[test]
    fn beam_one_matches_greedy_token_for_token() {
        for seed in 0..10 {
            let d = Decoder::random(4 + (seed as usize % 5), 100 + seed);
            let (g_hyp, b_hyp) = d.with_graph(|g, enc, nodes, cfg| {
                (
                    greedy_decode(g, enc, nodes, cfg, 6).unwrap(),
                    beam_decode(g, enc, nodes, cfg, 1, 6).unwrap(),
                )
            });
            assert_eq!(g_hyp.tokens, b_hyp.tokens, "seed {seed}");
            assert!((g_hyp.logprob - b_hyp.logprob).abs() < 1e-9, "seed {seed}");
        }
    }

    /// Every complete decoding of length at most `max_len`: token sequences
    /// over the non-EOS vocabulary, either EOS-terminated early or running
    /// the full budget.
    fn enumerate_decodings(vocab: usize, max_len: usize) -> Vec<(Vec<usize>, bool)> {
        let non_eos: Vec<usize> = (0..vocab).filter(|&t| t != EOS_ID).collect();
        let mut all = Vec::new();
        let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
        for len in 0..=max_len {
            for seq in &frontier {
                if len < max_len {
                    all.push((seq.clone(), true)); // ends by choosing EOS
                } else {
                    all.push((seq.clone(), false)); // ran out of budget
                }
            }
            if len == max_len {
                break;
            }
            frontier = frontier
                .iter()
                .flat_map(|seq| {
                    non_eos.iter().map(move |&t| {
                        let mut s = seq.clone();
                        s.push(t);
                        s
                    })
                })
                .collect();
        }
        all
    }

    #[test]
    fn huge_beam_equals_exhaustive_argmax() {
        for seed in 0..10 {
            let vocab = 4;
            let max_len = 3;
            let d = Decoder::random(vocab, 200 + seed);
            d.with_graph(|g, enc, nodes, cfg| {
                let best = beam_decode(g, enc, nodes, cfg, 64, max_len).unwrap();
                let mut oracle: Option<(f64, Vec<usize>)> = None;
                for (seq, ends_eos) in enumerate_decodings(vocab, max_len) {
                    let probe = Hypothesis {
                        tokens: seq.clone(),
                        logprob: 0.0,
                        state: init_decoder_state(g, cfg, 1),
                        finished: ends_eos || seq.len() == max_len,
                    };
                    let lp = hypothesis_logprob(g, enc, nodes, cfg, &probe, max_len).unwrap();
                    let better = match &oracle {
                        None => true,
                        Some((b_lp, b_seq)) => {
                            lp > *b_lp || (lp == *b_lp && seq < *b_seq)
                        }
                    };
                    if better {
                        oracle = Some((lp, seq));
                    }
                }
                let (o_lp, o_seq) = oracle.unwrap();
                assert_eq!(best.tokens, o_seq, "seed {seed}");
                assert!((best.logprob - o_lp).abs() < 1e-6, "seed {seed}");
            });
        }
    }

    #[test]
    fn nbest_is_sorted_bounded_and_recomputable() {
        let d = Decoder::random(8, 42);
        d.with_graph(|g, enc, nodes, cfg| {
            let nbest = beam_nbest(g, enc, nodes, cfg, 5, 5).unwrap();
            assert!(!nbest.is_empty() && nbest.len() <= 5);
            for pair in nbest.windows(2) {
                assert!(pair[0].logprob >= pair[1].logprob);
            }
            for hyp in &nbest {
                assert!(hyp.finished);
                let recomputed = hypothesis_logprob(g, enc, nodes, cfg, hyp, 5).unwrap();
                assert!(
                    (hyp.logprob - recomputed).abs() < 1e-5,
                    "{} vs {recomputed}",
                    hyp.logprob
                );
            }
        });
    }

    #[test]
    fn beam_scores_at_least_as_well_as_greedy() {
        let mut beam_total = 0.0;
        let mut greedy_total = 0.0;
        for seed in 0..6 {
            let d = Decoder::random(7, 300 + seed);
            let (b, g_) = d.with_graph(|g, enc, nodes, cfg| {
                (
                    beam_decode(g, enc, nodes, cfg, 4, 5).unwrap().logprob,
                    greedy_decode(g, enc, nodes, cfg, 5).unwrap().logprob,
                )
            });
            beam_total += b;
            greedy_total += g_;
            assert!(b >= g_ - 1e-9, "seed {seed}: beam {b} < greedy {g_}");
        }
        assert!(beam_total >= greedy_total - 1e-9);
    }

    #[test]
    fn zero_budgets_are_rejected() {
        let d = Decoder::random(6, 7);
        d.with_graph(|g, enc, nodes, cfg| {
            assert!(matches!(
                greedy_decode(g, enc, nodes, cfg, 0),
                Err(InferError::InvalidArg(_))
            ));
            assert!(matches!(
                beam_nbest(g, enc, nodes, cfg, 0, 4),
                Err(InferError::InvalidArg(_))
            ));
        });
    }

    fn word_vocab(words: &[&str]) -> Vocabulary {
        let seqs = vec![words.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
        Vocabulary::build(&seqs, 1, Level::Word).unwrap()
    }

    #[test]
    fn batch_translate_reports_per_utterance_errors_and_keeps_order() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(6);
        let params = init_params(&cfg, 9).unwrap();
        let vocab = word_vocab(&["alpha", "beta"]);
        let feats = random_feats(&cfg, 8, 77);
        write_features(&dir.path().join("ok.fbk"), &feats).unwrap();
        let utts = vec![
            Utterance {
                id: "first".into(),
                features: "ok.fbk".into(),
                n_frames: 8,
                translations: vec![vec!["alpha".into()]],
            },
            Utterance {
                id: "second".into(),
                features: "missing.fbk".into(),
                n_frames: 8,
                translations: vec![vec!["beta".into()]],
            },
        ];
        let results = batch_translate(
            &utts,
            dir.path(),
            &params,
            &cfg,
            &vocab,
            DecodeMode::Greedy,
            4,
        );
        assert_eq!(results.len(), 2);
        assert_eq!(results[0].0, "first");
        assert!(results[0].1.is_ok());
        assert_eq!(results[1].0, "second");
        assert!(results[1].1.is_err());
        assert!(batch_translate(
            &[],
            dir.path(),
            &params,
            &cfg,
            &vocab,
            DecodeMode::Beam,
            4
        )
        .is_empty());

        let out = dir.path().join("hyps.jsonl");
        write_translations(&out, &results).unwrap();
        let text = std::fs::read_to_string(&out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].contains("\"first\""));
        assert!(lines[1].contains("\"error\""));
        let back = read_translations(&out).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].0, "first");
    }

    #[test]
    fn decoded_unknown_tokens_render_as_the_unk_marker() {
        let vocab = word_vocab(&["alpha"]);
        let words = vocab.decode(&[UNK_ID, 4, PAD_ID, EOS_ID]);
        assert_eq!(words, vec!["<unk>".to_string(), "alpha".to_string()]);
    }
}
