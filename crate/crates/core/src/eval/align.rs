//! One-to-one token alignment between a hypothesis and a reference.
//!
//! Two tokens may be linked when they are identical, share a stem, or are
//! related by an optional synonym or paraphrase table. Among all one-to-one
//! alignments the search returns one with maximum cardinality; ties are
//! broken by fewest chunks (maximal runs contiguous in both sentences), then
//! fewest crossing link pairs, then by preferring higher-priority match
//! stages, and finally by the lexicographically smallest link list so the
//! result is fully deterministic.

use std::collections::HashMap;

use super::stem::stem;

/// How a hypothesis token was matched to a reference token, in priority
/// order: an identical pair is always labelled `Exact` even when a table
/// also relates the two tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MatchStage {
    Exact,
    Stem,
    Synonym,
    Paraphrase,
}

/// A single link in an alignment: hypothesis position, reference position,
/// and the stage that justified the link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchedPair {
    pub hyp_pos: usize,
    pub ref_pos: usize,
    pub stage: MatchStage,
}

/// A complete alignment: the links sorted by hypothesis position, and the
/// number of chunks (runs of links contiguous and monotone on both sides).
#[derive(Debug, Clone)]
pub struct Alignment {
    pub pairs: Vec<MatchedPair>,
    pub chunks: usize,
}

impl Alignment {
    pub fn matches(&self) -> usize {
        self.pairs.len()
    }
}

/// Token equivalence groups loaded from a table file: one group per line,
/// members separated by tabs. Two tokens are related when they share at
/// least one group. A token may appear in several groups.
#[derive(Debug, Clone, Default)]
pub struct EquivTable {
    groups: Vec<Vec<String>>,
    index: HashMap<String, Vec<usize>>,
}

impl EquivTable {
    pub fn from_groups<I, G, S>(groups: I) -> Self
    where
        I: IntoIterator<Item = G>,
        G: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut table = EquivTable::default();
        for group in groups {
            let members: Vec<String> = group.into_iter().map(Into::into).collect();
            if members.len() < 2 {
                continue;
            }
            let gid = table.groups.len();
            for member in &members {
                table.index.entry(member.clone()).or_default().push(gid);
            }
            table.groups.push(members);
        }
        table
    }

    /// Parses the tab-separated group format; blank lines are skipped.
    pub fn parse(text: &str) -> Self {
        Self::from_groups(text.lines().map(|line| {
            line.split('\t')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(str::to_string)
                .collect::<Vec<_>>()
        }))
    }

    pub fn read(path: &std::path::Path) -> std::io::Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn related(&self, a: &str, b: &str) -> bool {
        match (self.index.get(a), self.index.get(b)) {
            (Some(ga), Some(gb)) => ga.iter().any(|g| gb.contains(g)),
            _ => false,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Optional lookup tables for the two knowledge-based match stages. A stage
/// whose table is absent simply never fires.
#[derive(Debug, Clone, Default)]
pub struct MatchResources {
    pub synonyms: Option<EquivTable>,
    pub paraphrases: Option<EquivTable>,
}

impl MatchResources {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with_synonyms(mut self, table: EquivTable) -> Self {
        self.synonyms = Some(table);
        self
    }

    pub fn with_paraphrases(mut self, table: EquivTable) -> Self {
        self.paraphrases = Some(table);
        self
    }
}

/// Upper bound on hypothesis/reference lengths for the exhaustive tie-break
/// search; longer sentences keep the maximum-cardinality alignment found by
/// augmenting paths without optimizing chunks.
const EXACT_SEARCH_LIMIT: usize = 14;
/// Node budget for the exhaustive search; exhausted budgets fall back to the
/// best alignment seen so far (always of maximum cardinality).
const SEARCH_BUDGET: usize = 2_000_000;

/// Aligns hypothesis tokens to reference tokens one-to-one.
pub fn align_matches(hyp: &[String], reference: &[String], resources: &MatchResources) -> Alignment {
    let stages = stage_matrix(hyp, reference, resources);
    let seed_pairs = max_matching(&stages);
    let cardinality = seed_pairs.len();

    let mut best = Candidate::from_pairs(&seed_pairs, &stages);
    if cardinality > 0
        && hyp.len() <= EXACT_SEARCH_LIMIT
        && reference.len() <= EXACT_SEARCH_LIMIT
    {
        let mut search = Search {
            stages: &stages,
            target: cardinality,
            hyp_len: hyp.len(),
            budget: SEARCH_BUDGET,
            best: &mut best,
        };
        search.run(0, Vec::new(), 0, 0, 0, 0);
    }

    let pairs = best
        .pairs
        .iter()
        .map(|&(h, r)| MatchedPair {
            hyp_pos: h,
            ref_pos: r,
            stage: stages[h][r].expect("chosen pair has a stage"),
        })
        .collect::<Vec<_>>();
    let chunks = count_chunks(&best.pairs);
    Alignment { pairs, chunks }
}

/// The stage (if any) linking each hypothesis token to each reference token,
/// labelled by the highest-priority stage that applies.
fn stage_matrix(
    hyp: &[String],
    reference: &[String],
    resources: &MatchResources,
) -> Vec<Vec<Option<MatchStage>>> {
    let hyp_stems: Vec<String> = hyp.iter().map(|t| stem(t)).collect();
    let ref_stems: Vec<String> = reference.iter().map(|t| stem(t)).collect();
    hyp.iter()
        .enumerate()
        .map(|(i, h)| {
            reference
                .iter()
                .enumerate()
                .map(|(j, r)| {
                    if h == r {
                        Some(MatchStage::Exact)
                    } else if hyp_stems[i] == ref_stems[j] {
                        Some(MatchStage::Stem)
                    } else if resources
                        .synonyms
                        .as_ref()
                        .is_some_and(|t| t.related(h, r))
                    {
                        Some(MatchStage::Synonym)
                    } else if resources
                        .paraphrases
                        .as_ref()
                        .is_some_and(|t| t.related(h, r))
                    {
                        Some(MatchStage::Paraphrase)
                    } else {
                        None
                    }
                })
                .collect()
        })
        .collect()
}

/// Maximum-cardinality bipartite matching by augmenting paths. Returns the
/// matched (hyp, ref) pairs sorted by hypothesis position.
fn max_matching(stages: &[Vec<Option<MatchStage>>]) -> Vec<(usize, usize)> {
    let ref_len = stages.first().map_or(0, Vec::len);
    let mut ref_owner: Vec<Option<usize>> = vec![None; ref_len];

    fn try_assign(
        h: usize,
        stages: &[Vec<Option<MatchStage>>],
        seen: &mut [bool],
        ref_owner: &mut [Option<usize>],
    ) -> bool {
        for (r, stage) in stages[h].iter().enumerate() {
            if stage.is_none() || seen[r] {
                continue;
            }
            seen[r] = true;
            if ref_owner[r].is_none()
                || try_assign(ref_owner[r].unwrap(), stages, seen, ref_owner)
            {
                ref_owner[r] = Some(h);
                return true;
            }
        }
        false
    }

    for h in 0..stages.len() {
        let mut seen = vec![false; ref_len];
        try_assign(h, stages, &mut seen, &mut ref_owner);
    }

    let mut pairs: Vec<(usize, usize)> = ref_owner
        .iter()
        .enumerate()
        .filter_map(|(r, owner)| owner.map(|h| (h, r)))
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Number of chunks: runs of links, ordered by hypothesis position, that are
/// adjacent on both sides (`h` and `r` both advance by exactly one).
fn count_chunks(pairs: &[(usize, usize)]) -> usize {
    let mut chunks = 0;
    let mut prev: Option<(usize, usize)> = None;
    for &(h, r) in pairs {
        if prev != Some((h.wrapping_sub(1), r.wrapping_sub(1))) {
            chunks += 1;
        }
        prev = Some((h, r));
    }
    chunks
}

fn count_crossings(pairs: &[(usize, usize)]) -> usize {
    let mut crossings = 0;
    for (i, &(_, ri)) in pairs.iter().enumerate() {
        for &(_, rj) in &pairs[i + 1..] {
            if rj < ri {
                crossings += 1;
            }
        }
    }
    crossings
}

/// Sum of stage priority ranks (exact = 0 … paraphrase = 3); lower totals
/// mean the alignment favours higher-priority stages.
fn rank_sum(pairs: &[(usize, usize)], stages: &[Vec<Option<MatchStage>>]) -> usize {
    pairs
        .iter()
        .map(|&(h, r)| stages[h][r].expect("pair has a stage") as usize)
        .sum()
}

struct Candidate {
    pairs: Vec<(usize, usize)>,
    chunks: usize,
    crossings: usize,
    ranks: usize,
}

impl Candidate {
    fn from_pairs(pairs: &[(usize, usize)], stages: &[Vec<Option<MatchStage>>]) -> Self {
        Candidate {
            pairs: pairs.to_vec(),
            chunks: count_chunks(pairs),
            crossings: count_crossings(pairs),
            ranks: rank_sum(pairs, stages),
        }
    }

}

/// Depth-first enumeration of all maximum-cardinality alignments; `chunks`,
/// `crossings`, and `ranks` grow monotonically as links are added, so the
/// partial tuple prunes against the best complete alignment found so far.
struct Search<'a> {
    stages: &'a [Vec<Option<MatchStage>>],
    target: usize,
    hyp_len: usize,
    budget: usize,
    best: &'a mut Candidate,
}

impl Search<'_> {
    #[allow(clippy::too_many_arguments)]
    fn run(
        &mut self,
        pos: usize,
        pairs: Vec<(usize, usize)>,
        used: u64,
        chunks: usize,
        crossings: usize,
        ranks: usize,
    ) {
        if self.budget == 0 {
            return;
        }
        self.budget -= 1;

        if pairs.len() + (self.hyp_len - pos) < self.target {
            return; // Cannot reach maximum cardinality any more.
        }
        let partial = (chunks, crossings, ranks);
        let best_key = (self.best.chunks, self.best.crossings, self.best.ranks);
        if partial > best_key {
            return; // All three components only grow; this branch lost.
        }
        if pos == self.hyp_len {
            if pairs.len() == self.target
                && (partial, pairs.as_slice()) < (best_key, self.best.pairs.as_slice())
            {
                *self.best = Candidate { pairs, chunks, crossings, ranks };
            }
            return;
        }

        for (r, stage) in self.stages[pos].iter().enumerate() {
            let Some(stage) = stage else { continue };
            if used & (1 << r) != 0 {
                continue;
            }
            let extends_chunk =
                pairs.last() == Some(&(pos.wrapping_sub(1), r.wrapping_sub(1)));
            let new_chunks = chunks + usize::from(!extends_chunk);
            let new_crossings = crossings + pairs.iter().filter(|&&(_, pr)| pr > r).count();
            let mut new_pairs = pairs.clone();
            new_pairs.push((pos, r));
            self.run(
                pos + 1,
                new_pairs,
                used | (1 << r),
                new_chunks,
                new_crossings,
                ranks + *stage as usize,
            );
        }
        self.run(pos + 1, pairs, used, chunks, crossings, ranks);
    }
}
