//! Text normalization, vocabularies, bucketing/batching, ablation subsets,
//! and the synthetic corpus generator used for end-to-end verification.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::features::{FeatureError, FeatureMatrix};
use crate::sub_seed;

pub const PAD_ID: usize = 0;
pub const SOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
const N_SPECIALS: usize = 4;

/// Printed form of the UNK id when decoding model output.
pub const UNK_TOKEN: &str = "<unk>";
/// Inter-word marker used by character-level targets. Normalization never
/// emits an underscore, so it cannot collide with real text.
pub const SPACE_SYMBOL: &str = "_";

/// Bucket width in frames; 80 buckets of 25 frames cover 20 s of audio.
pub const BUCKET_WIDTH: usize = 25;
pub const N_BUCKETS: usize = 80;
/// Frame caps before bucketing: 20 s for word models, 15 s for character
/// models (character targets make long utterances disproportionately slow).
pub const WORD_FRAME_CAP: usize = 2000;
pub const CHAR_FRAME_CAP: usize = 1500;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("subset target of {target_hours} h exceeds the corpus total of {available_hours:.3} h")]
    TargetExceedsCorpus {
        target_hours: f64,
        available_hours: f64,
    },
    #[error("{0}")]
    InvalidSpec(String),
    #[error("{path} line {line}: {reason}")]
    BadManifest {
        path: String,
        line: usize,
        reason: String,
    },
}

/// Decoder granularity: one id per word, or per character with explicit
/// inter-word markers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Word,
    Character,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::Word => write!(f, "word"),
            Level::Character => write!(f, "character"),
        }
    }
}

impl std::str::FromStr for Level {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "word" => Ok(Level::Word),
            "character" | "char" => Ok(Level::Character),
            other => Err(format!("unknown level {other:?}; use word or character")),
        }
    }
}

/// Lower-cases, deletes punctuation (keeping apostrophes that sit inside a
/// word), and splits on whitespace.
pub fn normalize_and_tokenize(raw: &str) -> Vec<String> {
    let lowered = raw.to_lowercase();
    let kept: String = lowered
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c == '\'' || c.is_whitespace() {
                c
            } else {
                '\u{0}'
            }
        })
        .filter(|&c| c != '\u{0}')
        .collect();
    kept.split_whitespace()
        .map(|t| t.trim_matches('\''))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Token↔id map with PAD/SOS/EOS/UNK specials and per-token training counts.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    level: Level,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    counts: Vec<u64>,
}

impl Vocabulary {
    /// Builds ids from training token sequences: specials first, then tokens
    /// by descending count with lexicographic tie-breaks. Tokens under
    /// `min_count` are dropped (they encode as UNK).
    pub fn build(
        sequences: &[Vec<String>],
        min_count: u64,
        level: Level,
    ) -> Result<Self, CorpusError> {
        if sequences.iter().all(|s| s.is_empty()) {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for seq in sequences {
            match level {
                Level::Word => {
                    for tok in seq {
                        *counts.entry(tok.clone()).or_insert(0) += 1;
                    }
                }
                Level::Character => {
                    for unit in char_units(seq) {
                        *counts.entry(unit).or_insert(0) += 1;
                    }
                }
            }
        }
        let mut ranked: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .collect();
        // Descending count; the BTreeMap already yields lexicographic order,
        // and the stable sort preserves it within equal counts.
        ranked.sort_by(|a, b| b.1.cmp(&a.1));

        let mut vocab = Vocabulary {
            level,
            tokens: Vec::with_capacity(ranked.len()),
            index: HashMap::with_capacity(ranked.len()),
            counts: Vec::with_capacity(ranked.len()),
        };
        for (tok, count) in ranked {
            vocab.index.insert(tok.clone(), N_SPECIALS + vocab.tokens.len());
            vocab.tokens.push(tok);
            vocab.counts.push(count);
        }
        Ok(vocab)
    }

    pub fn level(&self) -> Level {
        self.level
    }

    /// Total id count including the four specials.
    pub fn size(&self) -> usize {
        N_SPECIALS + self.tokens.len()
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Training count of a token (0 when absent from the vocabulary).
    pub fn count_of(&self, token: &str) -> u64 {
        self.index.get(token).map_or(0, |&id| self.counts[id - N_SPECIALS])
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        id.checked_sub(N_SPECIALS)
            .and_then(|i| self.tokens.get(i))
            .map(String::as_str)
    }

    /// Non-special tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Encodes a normalized token sequence, appending EOS. Word level maps
    /// each token to an id; character level spells tokens out with
    /// [`SPACE_SYMBOL`] between words. Unknown units become UNK.
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        let mut ids = Vec::new();
        match self.level {
            Level::Word => {
                for tok in tokens {
                    ids.push(self.id_of(tok).unwrap_or(UNK_ID));
                }
            }
            Level::Character => {
                for unit in char_units(tokens) {
                    ids.push(self.id_of(&unit).unwrap_or(UNK_ID));
                }
            }
        }
        ids.push(EOS_ID);
        ids
    }

    /// Inverse of [`Vocabulary::encode`] for model output: drops PAD/SOS,
    /// stops at EOS, and at character level reassembles words at
    /// [`SPACE_SYMBOL`] boundaries.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        let mut words: Vec<String> = Vec::new();
        let mut current = String::new();
        for &id in ids {
            if id == EOS_ID {
                break;
            }
            if id == PAD_ID || id == SOS_ID {
                continue;
            }
            let unit = if id == UNK_ID {
                UNK_TOKEN
            } else {
                match self.token(id) {
                    Some(t) => t,
                    None => UNK_TOKEN,
                }
            };
            match self.level {
                Level::Word => words.push(unit.to_string()),
                Level::Character => {
                    if unit == SPACE_SYMBOL {
                        if !current.is_empty() {
                            words.push(std::mem::take(&mut current));
                        }
                    } else {
                        current.push_str(unit);
                    }
                }
            }
        }
        if self.level == Level::Character && !current.is_empty() {
            words.push(current);
        }
        words
    }

    /// Writes one token per line; the id of the token on line `n` (0-based)
    /// is `n + 4`, the specials being implicit.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let mut w = BufWriter::new(File::create(path)?);
        for tok in &self.tokens {
            writeln!(w, "{tok}")?;
        }
        Ok(())
    }

    /// Reads a vocabulary file written by [`Vocabulary::write`]. Training
    /// counts are not stored in the file and come back as zero; use
    /// [`Vocabulary::with_counts_from`] to restore them from training text.
    pub fn read(path: impl AsRef<Path>, level: Level) -> Result<Self, CorpusError> {
        let r = BufReader::new(File::open(path.as_ref())?);
        let mut vocab = Vocabulary {
            level,
            tokens: Vec::new(),
            index: HashMap::new(),
            counts: Vec::new(),
        };
        for line in r.lines() {
            let tok = line?;
            if tok.is_empty() {
                continue;
            }
            vocab.index.insert(tok.clone(), N_SPECIALS + vocab.tokens.len());
            vocab.tokens.push(tok);
            vocab.counts.push(0);
        }
        Ok(vocab)
    }

    /// Recounts token occurrences over training sequences, e.g. after loading
    /// a vocabulary file (which stores no counts).
    pub fn with_counts_from(mut self, sequences: &[Vec<String>]) -> Self {
        for c in &mut self.counts {
            *c = 0;
        }
        for seq in sequences {
            match self.level {
                Level::Word => {
                    for tok in seq {
                        if let Some(&id) = self.index.get(tok) {
                            self.counts[id - N_SPECIALS] += 1;
                        }
                    }
                }
                Level::Character => {
                    for unit in char_units(seq) {
                        if let Some(&id) = self.index.get(&unit) {
                            self.counts[id - N_SPECIALS] += 1;
                        }
                    }
                }
            }
        }
        self
    }
}

/// Character-level view of a word sequence: each word spelled out, with the
/// space symbol between consecutive words.
fn char_units(tokens: &[String]) -> Vec<String> {
    let mut units = Vec::new();
    for (i, tok) in tokens.iter().enumerate() {
        if i > 0 {
            units.push(SPACE_SYMBOL.to_string());
        }
        for c in tok.chars() {
            units.push(c.to_string());
        }
    }
    units
}

/// Caps an utterance's frame count for its decoder level and maps it to one
/// of the 80 25-frame-wide buckets.
pub fn assign_bucket(n_frames: usize, level: Level) -> (usize, usize) {
    debug_assert!(n_frames >= 1);
    let cap = match level {
        Level::Word => WORD_FRAME_CAP,
        Level::Character => CHAR_FRAME_CAP,
    };
    let capped = n_frames.clamp(1, cap);
    let bucket = capped.div_ceil(BUCKET_WIDTH) - 1;
    (bucket, capped)
}

/// One manifest record: an utterance's feature file plus its normalized
/// reference translations (the first is the training target).
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: String,
    pub n_frames: usize,
    pub translations: Vec<Vec<String>>,
}

impl Utterance {
    /// Audio duration implied by the frame count at a 10 ms hop.
    pub fn duration_secs(&self) -> f64 {
        self.n_frames as f64 * 0.01
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ManifestRecord {
    id: String,
    features: String,
    n_frames: usize,
    translations: Vec<String>,
}

/// Writes a JSON-lines manifest, translations as space-joined token strings.
pub fn write_manifest(path: impl AsRef<Path>, utts: &[Utterance]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    for u in utts {
        let rec = ManifestRecord {
            id: u.id.clone(),
            features: u.features.clone(),
            n_frames: u.n_frames,
            translations: u.translations.iter().map(|t| t.join(" ")).collect(),
        };
        serde_json::to_writer(&mut w, &rec)
            .map_err(|e| CorpusError::InvalidSpec(e.to_string()))?;
        writeln!(w)?;
    }
    Ok(())
}

/// Reads a JSON-lines manifest written by [`write_manifest`].
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<Utterance>, CorpusError> {
    let path = path.as_ref();
    let r = BufReader::new(File::open(path)?);
    let mut utts = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::BadManifest {
                path: path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        if rec.translations.is_empty() {
            return Err(CorpusError::BadManifest {
                path: path.display().to_string(),
                line: i + 1,
                reason: "utterance has no translations".into(),
            });
        }
        if rec.n_frames == 0 {
            return Err(CorpusError::BadManifest {
                path: path.display().to_string(),
                line: i + 1,
                reason: "utterance has zero frames".into(),
            });
        }
        utts.push(Utterance {
            id: rec.id,
            features: rec.features,
            n_frames: rec.n_frames,
            translations: rec
                .translations
                .iter()
                .map(|t| t.split_whitespace().map(str::to_string).collect())
                .collect(),
        });
    }
    Ok(utts)
}

/// An utterance with loaded (bucket-truncated) features and an encoded target,
/// ready for batching.
#[derive(Debug, Clone)]
pub struct PreparedUtterance {
    pub id: String,
    pub features: FeatureMatrix,
    pub target: Vec<usize>,
    pub bucket_id: usize,
}

/// Truncates features to the level's cap, assigns the bucket, and encodes the
/// first translation (with EOS) as the training target.
pub fn prepare_utterance(
    utt: &Utterance,
    features: FeatureMatrix,
    vocab: &Vocabulary,
) -> PreparedUtterance {
    let (bucket_id, capped) = assign_bucket(features.n_frames(), vocab.level());
    let features = if capped < features.n_frames() {
        FeatureMatrix::from_rows(
            features.values()[..capped * features.n_mels()].to_vec(),
            features.n_mels(),
            features.hop_ms(),
        )
    } else {
        features
    };
    PreparedUtterance {
        id: utt.id.clone(),
        features,
        target: vocab.encode(&utt.translations[0]),
        bucket_id,
    }
}

/// A zero/PAD-padded mini-batch drawn from a single bucket.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `B × t_max × n_mels`, zero-padded past each utterance's frames.
    pub features: Vec<f32>,
    pub n_mels: usize,
    pub t_max: usize,
    pub feature_lengths: Vec<usize>,
    /// `B × l_max`, PAD-padded past each target's length.
    pub targets: Vec<usize>,
    pub l_max: usize,
    pub target_lengths: Vec<usize>,
    pub bucket_id: usize,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.ids.len()
    }
}

/// Groups utterances by bucket, shuffles within buckets, chunks into batches
/// of at most `max_batch`, and shuffles the batch order — all from `seed`.
pub fn make_batches(utts: &[PreparedUtterance], max_batch: usize, seed: u64) -> Vec<Batch> {
    assert!(max_batch >= 1);
    let mut by_bucket: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, u) in utts.iter().enumerate() {
        by_bucket.entry(u.bucket_id).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "batch"));
    let mut batches = Vec::new();
    for (bucket_id, mut members) in by_bucket {
        members.shuffle(&mut rng);
        for chunk in members.chunks(max_batch) {
            batches.push(build_batch(utts, chunk, bucket_id));
        }
    }
    batches.shuffle(&mut rng);
    batches
}

fn build_batch(utts: &[PreparedUtterance], members: &[usize], bucket_id: usize) -> Batch {
    let n_mels = utts[members[0]].features.n_mels();
    let t_max = members.iter().map(|&i| utts[i].features.n_frames()).max().unwrap();
    let l_max = members.iter().map(|&i| utts[i].target.len()).max().unwrap();
    let b = members.len();

    let mut features = vec![0.0f32; b * t_max * n_mels];
    let mut targets = vec![PAD_ID; b * l_max];
    let mut ids = Vec::with_capacity(b);
    let mut feature_lengths = Vec::with_capacity(b);
    let mut target_lengths = Vec::with_capacity(b);
    for (row, &i) in members.iter().enumerate() {
        let u = &utts[i];
        let nf = u.features.n_frames();
        features[row * t_max * n_mels..row * t_max * n_mels + nf * n_mels]
            .copy_from_slice(u.features.values());
        targets[row * l_max..row * l_max + u.target.len()].copy_from_slice(&u.target);
        ids.push(u.id.clone());
        feature_lengths.push(nf);
        target_lengths.push(u.target.len());
    }
    Batch {
        ids,
        features,
        n_mels,
        t_max,
        feature_lengths,
        targets,
        l_max,
        target_lengths,
        bucket_id,
    }
}

/// Ablation subset request: draw utterances in seeded random order until
/// their cumulative duration first reaches `target_hours`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SubsetSpec {
    pub target_hours: f64,
    pub seed: u64,
    /// When set, subsets of different sizes under the same seed are prefixes
    /// of one another, giving comparable ablation curves.
    pub nested: bool,
}

/// Selects a duration-targeted random subset of the corpus.
pub fn sample_subset(utts: &[Utterance], spec: &SubsetSpec) -> Result<Vec<Utterance>, CorpusError> {
    if !(spec.target_hours > 0.0) {
        return Err(CorpusError::InvalidSpec(format!(
            "subset target must be positive, got {} h",
            spec.target_hours
        )));
    }
    let total_secs: f64 = utts.iter().map(Utterance::duration_secs).sum();
    let target_secs = spec.target_hours * 3600.0;
    if target_secs > total_secs {
        return Err(CorpusError::TargetExceedsCorpus {
            target_hours: spec.target_hours,
            available_hours: total_secs / 3600.0,
        });
    }
    let seed = if spec.nested {
        sub_seed(spec.seed, "subset")
    } else {
        sub_seed(spec.seed, &format!("subset.{}", spec.target_hours))
    };
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut picked = Vec::new();
    let mut acc = 0.0;
    for i in order {
        if acc >= target_secs {
            break;
        }
        acc += utts[i].duration_secs();
        picked.push(utts[i].clone());
    }
    Ok(picked)
}

/// Synthetic corpus shape: pseudo-English words, each with a fixed random
/// feature signature; utterances concatenate word signatures plus noise.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_utts: usize,
    pub vocab_size: usize,
    /// Words per utterance, inclusive.
    pub len_range: (usize, usize),
    pub n_mels: usize,
    /// Frames per word signature, inclusive.
    pub frames_per_word: (usize, usize),
    /// Peak amplitude of the additive per-utterance noise.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_utts: 50,
            vocab_size: 30,
            len_range: (2, 6),
            n_mels: 80,
            frames_per_word: (4, 8),
            noise: 0.05,
            seed: 7,
        }
    }
}

/// One generated utterance: features paired with its word-token target.
#[derive(Debug, Clone)]
pub struct SynthUtterance {
    pub id: String,
    pub features: FeatureMatrix,
    pub tokens: Vec<String>,
}

/// Syllable-built lexicon of distinct lower-case pseudo-English words,
/// 4–8 characters each.
pub fn synth_lexicon(vocab_size: usize, seed: u64) -> Vec<String> {
    const ONSETS: [&str; 12] = [
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t",
    ];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    const CODAS: [&str; 6] = ["", "n", "s", "r", "l", "t"];
    let mut syllables = Vec::new();
    for o in ONSETS {
        for v in VOWELS {
            for c in CODAS {
                syllables.push(format!("{o}{v}{c}"));
            }
        }
    }
    // Two-syllable words give 4–6 characters; pad short ones with a third
    // vowel to guarantee four.
    let mut words = Vec::new();
    'outer: for a in 0..syllables.len() {
        for b in 0..syllables.len() {
            let mut w = format!("{}{}", syllables[a], syllables[b]);
            if w.len() < 4 {
                w.push('a');
            }
            words.push(w);
            if words.len() >= vocab_size * 4 {
                break 'outer;
            }
        }
    }
    words.sort();
    words.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "lexicon"));
    words.shuffle(&mut rng);
    words.truncate(vocab_size);
    words
}

/// The fixed feature signature of one synthetic word. Each word's signature
/// comes from its own sub-seeded generator, so it is stable regardless of
/// word order or corpus size.
pub fn synth_signature(cfg: &SynthConfig, word: &str) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &format!("sig.{word}")));
    let frames = rng.random_range(cfg.frames_per_word.0..=cfg.frames_per_word.1);
    let values = (0..frames * cfg.n_mels)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    FeatureMatrix::from_rows(values, cfg.n_mels, 10)
}

/// Generates a deterministic paired corpus of features and token targets.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<Vec<SynthUtterance>, CorpusError> {
    if cfg.vocab_size < 2 || cfg.n_utts == 0 {
        return Err(CorpusError::InvalidSpec(
            "synthetic corpus needs vocab_size ≥ 2 and n_utts ≥ 1".into(),
        ));
    }
    if cfg.len_range.0 == 0 || cfg.len_range.0 > cfg.len_range.1 {
        return Err(CorpusError::InvalidSpec(format!(
            "bad utterance length range {:?}",
            cfg.len_range
        )));
    }
    if cfg.frames_per_word.0 == 0 || cfg.frames_per_word.0 > cfg.frames_per_word.1 {
        return Err(CorpusError::InvalidSpec(format!(
            "bad signature length range {:?}",
            cfg.frames_per_word
        )));
    }
    let words = synth_lexicon(cfg.vocab_size, cfg.seed);
    if words.len() < cfg.vocab_size {
        return Err(CorpusError::InvalidSpec(format!(
            "lexicon can only provide {} of {} requested words",
            words.len(),
            cfg.vocab_size
        )));
    }

    let signatures: Vec<FeatureMatrix> =
        words.iter().map(|w| synth_signature(cfg, w)).collect();

    let mut utts = Vec::with_capacity(cfg.n_utts);
    for i in 0..cfg.n_utts {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &format!("utt.{i}")));
        let n_words = rng.random_range(cfg.len_range.0..=cfg.len_range.1);
        let mut tokens = Vec::with_capacity(n_words);
        let mut values = Vec::new();
        for _ in 0..n_words {
            let w = rng.random_range(0..words.len());
            tokens.push(words[w].clone());
            values.extend_from_slice(signatures[w].values());
        }
        for v in &mut values {
            *v += rng.random_range(-cfg.noise..=cfg.noise);
        }
        utts.push(SynthUtterance {
            id: format!("synth-{i:05}"),
            features: FeatureMatrix::from_rows(values, cfg.n_mels, 10),
            tokens,
        });
    }
    Ok(utts)
}
