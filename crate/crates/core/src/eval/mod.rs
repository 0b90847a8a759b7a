//! Translation quality metrics.
//!
//! Scores tokenized hypotheses against one or more tokenized references per
//! utterance: corpus-level BLEU with brevity penalty, METEOR with staged
//! matching (exact / stem / synonym / paraphrase), clipped unigram precision
//! and recall, per-training-frequency-bucket accuracy for content words, and
//! out-of-vocabulary analysis. All metrics are pure functions of their
//! inputs and invariant to utterance order.

mod align;
mod stem;

pub use align::{
    align_matches, Alignment, EquivTable, MatchResources, MatchStage, MatchedPair,
};
pub use stem::stem;

use std::collections::{HashMap, HashSet};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("corpus size mismatch: {hyps} hypotheses vs {refs} reference sets")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("utterance {index} has no references")]
    EmptyReferences { index: usize },
    #[error("cannot compute precision over zero hypothesis tokens")]
    EmptyHypotheses,
    #[error("invalid metric parameter: {0}")]
    InvalidParameter(String),
}

fn validate_corpus(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<(), EvalError> {
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    for (index, r) in refs.iter().enumerate() {
        if r.is_empty() {
            return Err(EvalError::EmptyReferences { index });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

/// Corpus-level BLEU: the geometric mean of clipped n-gram precisions scaled
/// by the brevity penalty, on a 0–100 scale.
#[derive(Debug, Clone)]
pub struct BleuScore {
    pub score: f64,
    /// Clipped n-gram precision for n = 1..=max_n, as fractions in [0, 1].
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Scores a corpus with BLEU up to `max_n`-grams (4 for standard BLEU).
///
/// Precision for each order pools clipped counts over the whole corpus
/// before dividing; the clip for an n-gram is its maximum count in any
/// reference of the same utterance. The brevity penalty compares the total
/// hypothesis length against the sum of closest reference lengths (ties
/// resolved toward the shorter reference): `exp(1 - r/c)` when `c < r`,
/// otherwise 1. If any order has zero matches the score is 0, though the
/// per-order precisions are still reported.
pub fn bleu_corpus(
    hyps: &[Vec<String>],
    refs: &[Vec<Vec<String>>],
    max_n: usize,
) -> Result<BleuScore, EvalError> {
    if max_n == 0 {
        return Err(EvalError::InvalidParameter("max_n must be at least 1".into()));
    }
    validate_corpus(hyps, refs)?;

    let mut clipped = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let mut hyp_len_sum = 0usize;
    let mut ref_len_sum = 0usize;

    for (hyp, utt_refs) in hyps.iter().zip(refs) {
        hyp_len_sum += hyp.len();
        ref_len_sum += utt_refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .expect("references validated non-empty");

        for n in 1..=max_n {
            if hyp.len() < n {
                continue;
            }
            total[n - 1] += hyp.len() - n + 1;
            let mut ref_max: HashMap<&[String], usize> = HashMap::new();
            for r in utt_refs {
                for (gram, count) in ngram_counts(r, n) {
                    let entry = ref_max.entry(gram).or_insert(0);
                    *entry = (*entry).max(count);
                }
            }
            for (gram, count) in ngram_counts(hyp, n) {
                clipped[n - 1] += count.min(ref_max.get(gram).copied().unwrap_or(0));
            }
        }
    }

    let precisions: Vec<f64> = clipped
        .iter()
        .zip(&total)
        .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
        .collect();
    let brevity_penalty = if hyp_len_sum == 0 {
        0.0
    } else if hyp_len_sum < ref_len_sum {
        (1.0 - ref_len_sum as f64 / hyp_len_sum as f64).exp()
    } else {
        1.0
    };
    let score = if hyp_len_sum == 0 || precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuScore {
        score,
        precisions,
        brevity_penalty,
    })
}

/// Corpus-level clipped unigram precision as a percentage: matched
/// hypothesis tokens (each clipped by its maximum count in any reference of
/// the utterance) over total hypothesis tokens.
pub fn unigram_precision(
    hyps: &[Vec<String>],
    refs: &[Vec<Vec<String>>],
) -> Result<f64, EvalError> {
    validate_corpus(hyps, refs)?;
    let mut matched = 0usize;
    let mut total = 0usize;
    for (hyp, utt_refs) in hyps.iter().zip(refs) {
        total += hyp.len();
        let mut ref_max: HashMap<&str, usize> = HashMap::new();
        for r in utt_refs {
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for tok in r {
                *counts.entry(tok).or_insert(0) += 1;
            }
            for (tok, count) in counts {
                let entry = ref_max.entry(tok).or_insert(0);
                *entry = (*entry).max(count);
            }
        }
        let mut hyp_counts: HashMap<&str, usize> = HashMap::new();
        for tok in hyp {
            *hyp_counts.entry(tok).or_insert(0) += 1;
        }
        for (tok, count) in hyp_counts {
            matched += count.min(ref_max.get(tok).copied().unwrap_or(0));
        }
    }
    if total == 0 {
        return Err(EvalError::EmptyHypotheses);
    }
    Ok(100.0 * matched as f64 / total as f64)
}

// ---------------------------------------------------------------------------
// METEOR
// ---------------------------------------------------------------------------

/// Per-stage match weights applied to aligned token pairs. A pair always
/// carries the weight of the highest-priority stage that links it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct StageWeights {
    pub exact: f64,
    pub stem: f64,
    pub synonym: f64,
    pub paraphrase: f64,
}

impl Default for StageWeights {
    fn default() -> Self {
        StageWeights {
            exact: 1.0,
            stem: 0.6,
            synonym: 0.8,
            paraphrase: 0.6,
        }
    }
}

impl StageWeights {
    /// Weights that credit only identical-token matches; non-exact stages
    /// still align tokens but contribute nothing.
    pub fn exact_only() -> Self {
        StageWeights {
            exact: 1.0,
            stem: 0.0,
            synonym: 0.0,
            paraphrase: 0.0,
        }
    }

    pub fn of(&self, stage: MatchStage) -> f64 {
        match stage {
            MatchStage::Exact => self.exact,
            MatchStage::Stem => self.stem,
            MatchStage::Synonym => self.synonym,
            MatchStage::Paraphrase => self.paraphrase,
        }
    }
}

/// METEOR hyperparameters. `alpha` balances precision against recall in the
/// harmonic mean (larger alpha weights recall more), `beta` shapes the
/// fragmentation penalty, and `gamma` scales it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MeteorParams {
    pub weights: StageWeights,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for MeteorParams {
    fn default() -> Self {
        MeteorParams {
            weights: StageWeights::default(),
            alpha: 0.85,
            beta: 0.2,
            gamma: 0.6,
        }
    }
}

/// METEOR result with its intermediate components, all as fractions.
#[derive(Debug, Clone)]
pub struct MeteorScore {
    pub score: f64,
    pub fmean: f64,
    pub precision: f64,
    pub recall: f64,
    pub fragmentation: f64,
}

struct MeteorTotals {
    weighted: f64,
    matches: usize,
    chunks: usize,
    hyp_tokens: usize,
    ref_tokens: usize,
}

fn meteor_from_totals(t: &MeteorTotals, params: &MeteorParams) -> MeteorScore {
    let precision = if t.hyp_tokens == 0 {
        0.0
    } else {
        t.weighted / t.hyp_tokens as f64
    };
    let recall = if t.ref_tokens == 0 {
        0.0
    } else {
        t.weighted / t.ref_tokens as f64
    };
    let denom = params.alpha * precision + (1.0 - params.alpha) * recall;
    let fmean = if denom == 0.0 {
        0.0
    } else {
        precision * recall / denom
    };
    let fragmentation = if t.matches == 0 {
        0.0
    } else {
        t.chunks as f64 / t.matches as f64
    };
    let penalty = params.gamma * fragmentation.powf(params.beta);
    MeteorScore {
        score: fmean * (1.0 - penalty),
        fmean,
        precision,
        recall,
        fragmentation,
    }
}

/// Corpus-level METEOR.
///
/// Each hypothesis is aligned against every reference of its utterance and
/// the best-scoring reference is kept. Corpus aggregation sums the weighted
/// match mass, match/chunk counts, and token totals over utterances before
/// applying the precision/recall/fragmentation formulas, rather than
/// averaging per-utterance scores.
pub fn meteor_corpus(
    hyps: &[Vec<String>],
    refs: &[Vec<Vec<String>>],
    params: &MeteorParams,
    resources: &MatchResources,
) -> Result<MeteorScore, EvalError> {
    if !(0.0..=1.0).contains(&params.alpha) {
        return Err(EvalError::InvalidParameter(format!(
            "alpha must lie in [0, 1], got {}",
            params.alpha
        )));
    }
    validate_corpus(hyps, refs)?;

    let mut totals = MeteorTotals {
        weighted: 0.0,
        matches: 0,
        chunks: 0,
        hyp_tokens: 0,
        ref_tokens: 0,
    };
    for (hyp, utt_refs) in hyps.iter().zip(refs) {
        let mut best: Option<(f64, MeteorTotals)> = None;
        for r in utt_refs {
            let alignment = align_matches(hyp, r, resources);
            let utt = MeteorTotals {
                weighted: alignment
                    .pairs
                    .iter()
                    .map(|p| params.weights.of(p.stage))
                    .sum(),
                matches: alignment.matches(),
                chunks: alignment.chunks,
                hyp_tokens: hyp.len(),
                ref_tokens: r.len(),
            };
            let score = meteor_from_totals(&utt, params).score;
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, utt));
            }
        }
        let (_, utt) = best.expect("references validated non-empty");
        totals.weighted += utt.weighted;
        totals.matches += utt.matches;
        totals.chunks += utt.chunks;
        totals.hyp_tokens += utt.hyp_tokens;
        totals.ref_tokens += utt.ref_tokens;
    }
    Ok(meteor_from_totals(&totals, params))
}

/// Corpus-level staged unigram recall as a percentage: the recall component
/// of METEOR under the given stage weights.
pub fn unigram_recall(
    hyps: &[Vec<String>],
    refs: &[Vec<Vec<String>>],
    weights: &StageWeights,
    resources: &MatchResources,
) -> Result<f64, EvalError> {
    let params = MeteorParams {
        weights: weights.clone(),
        ..MeteorParams::default()
    };
    Ok(meteor_corpus(hyps, refs, &params, resources)?.recall * 100.0)
}

// ---------------------------------------------------------------------------
// Content words, frequency buckets, OOV
// ---------------------------------------------------------------------------

static STOPWORDS_TEXT: &str = include_str!("stopwords.txt");

/// The bundled list of common English function words, one per line.
pub fn stopwords() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| {
        STOPWORDS_TEXT
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect()
    })
}

pub fn is_stopword(word: &str) -> bool {
    stopwords().contains(word)
}

/// Content words are longer than five characters and not stopwords.
pub fn is_content_word(word: &str) -> bool {
    word.chars().count() > 5 && !is_stopword(word)
}

/// Training-frequency band of a word type. The bands deliberately leave
/// gaps so each captures clearly rare, mid-frequency, or common types.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreqBucket {
    /// 1–10 training occurrences.
    Rare,
    /// 25–100 training occurrences.
    Medium,
    /// 150 or more training occurrences.
    Frequent,
}

/// Buckets a training count; counts of zero or in the gaps between bands
/// yield `None`.
pub fn freq_bucket(count: usize) -> Option<FreqBucket> {
    match count {
        1..=10 => Some(FreqBucket::Rare),
        25..=100 => Some(FreqBucket::Medium),
        c if c >= 150 => Some(FreqBucket::Frequent),
        _ => None,
    }
}

/// Accuracy tallies for one frequency bucket.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct BucketStats {
    /// Distinct bucket types observed in hypotheses or references.
    pub types: usize,
    /// Hypothesis tokens of bucket types.
    pub hyp_tokens: usize,
    /// Hypothesis tokens matched in some reference (clipped per utterance).
    pub matched_hyp_tokens: usize,
    /// First-reference tokens of bucket types.
    pub ref_tokens: usize,
    /// First-reference tokens recovered by the hypothesis (clipped).
    pub matched_ref_tokens: usize,
    /// matched_hyp_tokens / hyp_tokens as a percentage (0 when undefined).
    pub precision: f64,
    /// matched_ref_tokens / ref_tokens as a percentage (0 when undefined).
    pub recall: f64,
}

/// Content-word accuracy split by training frequency.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct FreqBucketReport {
    pub rare: BucketStats,
    pub medium: BucketStats,
    pub frequent: BucketStats,
}

/// Measures how well hypotheses handle content words of each training
/// frequency band.
///
/// Only content words whose training count falls in a band participate.
/// Precision clips each hypothesis token count by the maximum count across
/// that utterance's references; recall measures first-reference tokens
/// recovered by the hypothesis. Type counts are distinct bucket types seen
/// in any hypothesis or reference.
pub fn freq_bucket_report(
    hyps: &[Vec<String>],
    refs: &[Vec<Vec<String>>],
    train_counts: &HashMap<String, usize>,
) -> Result<FreqBucketReport, EvalError> {
    validate_corpus(hyps, refs)?;

    let bucket_of = |word: &str| -> Option<FreqBucket> {
        if !is_content_word(word) {
            return None;
        }
        freq_bucket(train_counts.get(word).copied().unwrap_or(0))
    };
    let mut report = FreqBucketReport::default();
    let mut types: [HashSet<&str>; 3] = [HashSet::new(), HashSet::new(), HashSet::new()];
    let slot = |bucket: FreqBucket| bucket as usize;

    for (hyp, utt_refs) in hyps.iter().zip(refs) {
        let mut hyp_counts: HashMap<&str, usize> = HashMap::new();
        for tok in hyp {
            *hyp_counts.entry(tok).or_insert(0) += 1;
        }
        let mut ref_max: HashMap<&str, usize> = HashMap::new();
        for r in utt_refs {
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for tok in r {
                *counts.entry(tok).or_insert(0) += 1;
                if let Some(b) = bucket_of(tok) {
                    types[slot(b)].insert(tok.as_str());
                }
            }
            for (tok, count) in counts {
                let entry = ref_max.entry(tok).or_insert(0);
                *entry = (*entry).max(count);
            }
        }
        for (tok, &count) in &hyp_counts {
            let Some(bucket) = bucket_of(tok) else { continue };
            types[slot(bucket)].insert(tok);
            let stats = report.bucket_mut(bucket);
            stats.hyp_tokens += count;
            stats.matched_hyp_tokens += count.min(ref_max.get(tok).copied().unwrap_or(0));
        }
        let first_ref = &utt_refs[0];
        let mut ref_counts: HashMap<&str, usize> = HashMap::new();
        for tok in first_ref {
            *ref_counts.entry(tok).or_insert(0) += 1;
        }
        for (tok, count) in ref_counts {
            let Some(bucket) = bucket_of(tok) else { continue };
            let stats = report.bucket_mut(bucket);
            stats.ref_tokens += count;
            stats.matched_ref_tokens += count.min(hyp_counts.get(tok).copied().unwrap_or(0));
        }
    }

    for bucket in [FreqBucket::Rare, FreqBucket::Medium, FreqBucket::Frequent] {
        let stats = report.bucket_mut(bucket);
        stats.types = types[slot(bucket)].len();
        stats.precision = percentage(stats.matched_hyp_tokens, stats.hyp_tokens);
        stats.recall = percentage(stats.matched_ref_tokens, stats.ref_tokens);
    }
    Ok(report)
}

fn percentage(numer: usize, denom: usize) -> f64 {
    if denom == 0 {
        0.0
    } else {
        100.0 * numer as f64 / denom as f64
    }
}

impl FreqBucketReport {
    fn bucket_mut(&mut self, bucket: FreqBucket) -> &mut BucketStats {
        match bucket {
            FreqBucket::Rare => &mut self.rare,
            FreqBucket::Medium => &mut self.medium,
            FreqBucket::Frequent => &mut self.frequent,
        }
    }

    pub fn bucket(&self, bucket: FreqBucket) -> &BucketStats {
        match bucket {
            FreqBucket::Rare => &self.rare,
            FreqBucket::Medium => &self.medium,
            FreqBucket::Frequent => &self.frequent,
        }
    }
}

/// Out-of-vocabulary tallies: how often words unseen in training appear in
/// hypotheses, how often references demand them, and how many of the
/// demanded ones the hypotheses recover.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct OovReport {
    /// Distinct hypothesis types absent from the training vocabulary.
    pub hyp_types: usize,
    /// Hypothesis token occurrences of those types.
    pub hyp_tokens: usize,
    /// Distinct reference types absent from the training vocabulary.
    pub ref_types: usize,
    /// Reference token occurrences of those types, over all references.
    pub ref_tokens: usize,
    /// Reference OOV types produced by the paired hypothesis at least once.
    pub recovered_types: usize,
    /// Reference OOV token occurrences whose type the paired hypothesis
    /// contains.
    pub recovered_tokens: usize,
}

/// Reports out-of-vocabulary behaviour against the training word set.
pub fn oov_report(
    hyps: &[Vec<String>],
    refs: &[Vec<Vec<String>>],
    train_words: &HashSet<String>,
) -> OovReport {
    let mut report = OovReport::default();
    let mut hyp_types: HashSet<&str> = HashSet::new();
    let mut ref_types: HashSet<&str> = HashSet::new();
    let mut recovered_types: HashSet<&str> = HashSet::new();

    for (hyp, utt_refs) in hyps.iter().zip(refs) {
        let hyp_set: HashSet<&str> = hyp.iter().map(String::as_str).collect();
        for tok in hyp {
            if !train_words.contains(tok) {
                hyp_types.insert(tok);
                report.hyp_tokens += 1;
            }
        }
        for r in utt_refs {
            for tok in r {
                if !train_words.contains(tok) {
                    ref_types.insert(tok);
                    report.ref_tokens += 1;
                    if hyp_set.contains(tok.as_str()) {
                        recovered_types.insert(tok);
                        report.recovered_tokens += 1;
                    }
                }
            }
        }
    }
    report.hyp_types = hyp_types.len();
    report.ref_types = ref_types.len();
    report.recovered_types = recovered_types.len();
    report
}

// ---------------------------------------------------------------------------
// Combined report
// ---------------------------------------------------------------------------

/// All metrics for one evaluation run, serializable as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// BLEU-4 on the 0–100 scale.
    pub bleu: f64,
    /// Clipped n-gram precisions (fractions) backing the BLEU score.
    pub precisions: Vec<f64>,
    /// BLEU brevity penalty.
    pub bp: f64,
    /// METEOR (fraction in [0, 1]).
    pub meteor: f64,
    /// Clipped unigram precision, percent.
    pub precision_unigram: f64,
    /// Staged unigram recall under the METEOR weights, percent.
    pub recall_staged: f64,
    /// Exact-match-only unigram recall, percent.
    pub recall_exact: f64,
    /// Content-word accuracy by training-frequency bucket.
    pub buckets: FreqBucketReport,
    /// Out-of-vocabulary analysis.
    pub oov: OovReport,
}

/// Runs every metric over the corpus. `train_counts` maps training word
/// types to their occurrence counts and also defines the vocabulary for the
/// OOV analysis.
pub fn evaluate_corpus(
    hyps: &[Vec<String>],
    refs: &[Vec<Vec<String>>],
    train_counts: &HashMap<String, usize>,
    params: &MeteorParams,
    resources: &MatchResources,
) -> Result<EvalReport, EvalError> {
    let bleu = bleu_corpus(hyps, refs, 4)?;
    let meteor = meteor_corpus(hyps, refs, params, resources)?;
    let precision_unigram = unigram_precision(hyps, refs)?;
    let recall_staged = unigram_recall(hyps, refs, &params.weights, resources)?;
    let recall_exact = unigram_recall(hyps, refs, &StageWeights::exact_only(), resources)?;
    let buckets = freq_bucket_report(hyps, refs, train_counts)?;
    let train_words: HashSet<String> = train_counts.keys().cloned().collect();
    let oov = oov_report(hyps, refs, &train_words);
    Ok(EvalReport {
        bleu: bleu.score,
        precisions: bleu.precisions,
        bp: bleu.brevity_penalty,
        meteor: meteor.score,
        precision_unigram,
        recall_staged,
        recall_exact,
        buckets,
        oov,
    })
}
