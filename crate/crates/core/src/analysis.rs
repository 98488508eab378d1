//! Cross-trial consistency analyses: top-k agreement, latent weight
//! patterns, and word-pair movement between kernel bins.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{QueryGroup, PAD};
use crate::error::{Error, Result};
use crate::eval::rank_all;
use crate::model::{cosine, EmbeddingTable, KernelBank, Scorer, TrainedTrial};

/// Distribution over queries of how many distinct documents a set of trials
/// places in their top k.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgreementHistogram {
    pub k: usize,
    /// distinct-document count → number of queries
    pub counts: BTreeMap<usize, usize>,
}

impl AgreementHistogram {
    pub fn num_queries(&self) -> usize {
        self.counts.values().sum()
    }

    /// Share of queries whose distinct count is at least `n`.
    pub fn fraction_at_least(&self, n: usize) -> f64 {
        let total = self.num_queries();
        if total == 0 {
            return 0.0;
        }
        self.counts.range(n..).map(|(_, c)| c).sum::<usize>() as f64 / total as f64
    }
}

/// For each query, ranks the candidates with every trial and counts the
/// distinct documents among the trials' top-k lists. Queries with fewer than
/// `k` candidates use all of them.
pub fn agreement_histogram<S: Scorer>(trials: &[S], queries: &[QueryGroup], k: usize) -> Result<AgreementHistogram> {
    if trials.len() < 2 {
        return Err(Error::TooFewTrials { needed: 2, got: trials.len() });
    }
    if k == 0 {
        return Err(Error::Config("agreement k must be at least 1".into()));
    }
    let rankings = trials
        .par_iter()
        .map(|t| rank_all(t, queries))
        .collect::<Result<Vec<_>>>()?;
    let mut counts = BTreeMap::new();
    for qi in 0..queries.len() {
        let distinct: BTreeSet<&str> = rankings.iter().flat_map(|r| r[qi].top(k)).collect();
        *counts.entry(distinct.len()).or_insert(0) += 1;
    }
    Ok(AgreementHistogram { k, counts })
}

/// `k,distinct_count,num_queries` rows for each histogram.
pub fn write_histograms_csv<W: Write>(histograms: &[AgreementHistogram], mut out: W) -> Result<()> {
    writeln!(out, "k,distinct_count,num_queries")?;
    for h in histograms {
        for (count, queries) in &h.counts {
            writeln!(out, "{},{count},{queries}", h.k)?;
        }
    }
    Ok(())
}

/// The two latent weight patterns. `A` is the one whose soft-match weights
/// start with a downward slope from the high-similarity end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Pattern {
    A,
    B,
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pattern::A => "A",
            Pattern::B => "B",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatternLabel {
    pub label: Pattern,
    /// Signed projection onto the separating direction, positive for A.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatternAssignment {
    /// One label per input trial, in input order.
    pub labels: Vec<PatternLabel>,
    /// Set when every weight vector was identical and no split exists.
    pub degenerate: bool,
}

impl PatternAssignment {
    pub fn members(&self, pattern: Pattern) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.label == pattern)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, pattern: Pattern) -> usize {
        self.labels.iter().filter(|l| l.label == pattern).count()
    }
}

/// The soft-match weights of a trial (every kernel but the first, which is
/// the exact-match kernel), ordered by descending μ.
pub fn soft_match_weights(trial: &TrainedTrial) -> Vec<f64> {
    let mus = trial.kernels.mus();
    let mut idx: Vec<usize> = (1..mus.len()).collect();
    idx.sort_by(|&a, &b| mus[b].total_cmp(&mus[a]));
    idx.into_iter().map(|k| trial.weights.w[k]).collect()
}

/// Splits trials into two weight patterns.
///
/// Soft-match weight vectors are L2-normalised and centred; trials are
/// divided by the sign of their projection onto the leading principal
/// direction. The group whose centroid falls more steeply from the
/// highest-μ soft kernel to the next is labelled [`Pattern::A`].
pub fn classify_patterns<T: Borrow<TrainedTrial>>(trials: &[T]) -> Result<PatternAssignment> {
    if trials.len() < 2 {
        return Err(Error::TooFewTrials { needed: 2, got: trials.len() });
    }
    let bank = &trials[0].borrow().kernels;
    if trials.iter().any(|t| t.borrow().kernels != *bank) {
        return Err(Error::KernelMismatch);
    }
    let vectors: Vec<Vec<f64>> = trials.iter().map(|t| soft_match_weights(t.borrow())).collect();
    classify_weight_vectors(&vectors)
}

/// [`classify_patterns`] on raw soft-match weight vectors (descending μ).
pub fn classify_weight_vectors(vectors: &[Vec<f64>]) -> Result<PatternAssignment> {
    let n = vectors.len();
    if n < 2 {
        return Err(Error::TooFewTrials { needed: 2, got: n });
    }
    let dim = vectors[0].len();
    if dim < 2 || vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Config("pattern classification needs at least two soft-match kernels".into()));
    }
    let unit: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter().map(|x| x / norm).collect()
            } else {
                v.clone()
            }
        })
        .collect();

    // Work in a canonical order so the outcome cannot depend on input order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        unit[a]
            .iter()
            .zip(&unit[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut mean = vec![0.0; dim];
    for &i in &order {
        for (m, x) in mean.iter_mut().zip(&unit[i]) {
            *m += x / n as f64;
        }
    }
    let centred: Vec<Vec<f64>> = unit
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();

    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    // First vector of largest norm in canonical order.
    let start = order
        .iter()
        .copied()
        .rev()
        .max_by(|&a, &b| norm(&centred[a]).total_cmp(&norm(&centred[b])))
        .expect("n >= 2");
    if norm(&centred[start]) < 1e-12 {
        log::warn!("all {n} weight vectors coincide; labelling every trial as pattern A");
        return Ok(PatternAssignment {
            labels: vec![PatternLabel { label: Pattern::A, score: 0.0 }; n],
            degenerate: true,
        });
    }

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut direction: Vec<f64> = centred[start].iter().map(|x| x / norm(&centred[start])).collect();
    for _ in 0..500 {
        let mut next = vec![0.0; dim];
        for &i in &order {
            let p = dot(&centred[i], &direction);
            for (d, c) in next.iter_mut().zip(&centred[i]) {
                *d += p * c;
            }
        }
        let len = norm(&next);
        if len == 0.0 {
            break;
        }
        next.iter_mut().for_each(|x| *x /= len);
        let moved = next.iter().zip(&direction).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        direction = next;
        if moved < 1e-15 {
            break;
        }
    }

    let projections: Vec<f64> = centred.iter().map(|c| dot(c, &direction)).collect();
    let centroid_slope = |positive: bool| {
        let members: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&i| (projections[i] >= 0.0) == positive)
            .collect();
        if members.is_empty() {
            return f64::INFINITY;
        }
        let avg = |k: usize| members.iter().map(|&i| unit[i][k]).sum::<f64>() / members.len() as f64;
        avg(1) - avg(0)
    };
    let positive_is_a = centroid_slope(true) <= centroid_slope(false);
    let sign = if positive_is_a { 1.0 } else { -1.0 };
    let labels = projections
        .iter()
        .map(|&p| PatternLabel {
            label: if (p >= 0.0) == positive_is_a { Pattern::A } else { Pattern::B },
            score: sign * p,
        })
        .collect();
    Ok(PatternAssignment { labels, degenerate: false })
}

/// `trial_id,seed,label,score` rows.
pub fn write_patterns_csv<W: Write>(
    trial_ids: &[String],
    seeds: &[u64],
    assignment: &PatternAssignment,
    mut out: W,
) -> Result<()> {
    writeln!(out, "trial_id,seed,label,score")?;
    for ((id, seed), l) in trial_ids.iter().zip(seeds).zip(&assignment.labels) {
        writeln!(out, "{id},{seed},{},{:.6}", l.label, l.score)?;
    }
    Ok(())
}

/// Sizes for [`sample_word_pairs`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSampling {
    pub num_queries: usize,
    pub docs_per_query: usize,
    pub per_bin: usize,
}

impl Default for PairSampling {
    fn default() -> Self {
        Self {
            num_queries: 1000,
            docs_per_query: 30,
            per_bin: 100,
        }
    }
}

/// Samples query-word/document-word pairs stratified by kernel bin.
///
/// Draws up to `num_queries` queries and `docs_per_query` documents of each,
/// collects their distinct non-PAD word pairs, bins every pair by its nearest
/// kernel under `reference`, then keeps at most `per_bin` uniformly chosen
/// pairs per bin. Output is grouped by bin in kernel order.
pub fn sample_word_pairs(
    queries: &[QueryGroup],
    sampling: PairSampling,
    reference: &TrainedTrial,
    seed: u64,
) -> Result<Vec<(u32, u32)>> {
    if queries.iter().all(|q| q.candidates.is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |len: usize, amount: usize| {
        let mut idx = sample(&mut rng, len, amount.min(len)).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut pairs = BTreeSet::new();
    for qi in pick(queries.len(), sampling.num_queries) {
        let q = &queries[qi];
        for di in pick(q.candidates.len(), sampling.docs_per_query) {
            for &qt in &q.query_terms {
                for &dt in &q.candidates[di].terms {
                    if qt != PAD && dt != PAD {
                        pairs.insert((qt, dt));
                    }
                }
            }
        }
    }

    let emb = &reference.embeddings;
    check_ids(pairs.iter().flat_map(|&(a, b)| [a, b]), emb)?;
    let mut bins: Vec<Vec<(u32, u32)>> = vec![Vec::new(); reference.kernels.len()];
    for (a, b) in pairs {
        let k = reference.kernels.nearest(cosine(emb.row(a), emb.row(b)));
        bins[k].push((a, b));
    }
    let mut out = Vec::new();
    for bin in bins {
        for i in pick(bin.len(), sampling.per_bin) {
            out.push(bin[i]);
        }
    }
    Ok(out)
}

fn check_ids(ids: impl Iterator<Item = u32>, emb: &EmbeddingTable) -> Result<()> {
    let vocab_size = emb.vocab_size();
    for id in ids {
        if id as usize >= vocab_size {
            return Err(Error::TokenOutOfRange { id, vocab_size });
        }
    }
    Ok(())
}

/// Counts of word pairs by (bin under trial X, bin under trial Y).
#[derive(Debug, Clone, PartialEq)]
pub struct MovementHeatmap {
    pub mus: Vec<f64>,
    /// `counts[x][y]`: pairs in kernel `x` under trial X and kernel `y`
    /// under trial Y.
    pub counts: Vec<Vec<u64>>,
}

impl MovementHeatmap {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn diagonal(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn diagonal_fraction(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.diagonal() as f64 / t as f64,
        }
    }

    pub fn is_diagonal(&self) -> bool {
        self.diagonal() == self.total()
    }

    pub fn transpose(&self) -> Self {
        let n = self.counts.len();
        Self {
            mus: self.mus.clone(),
            counts: (0..n).map(|y| (0..n).map(|x| self.counts[x][y]).collect()).collect(),
        }
    }

    /// Header `mu_x\mu_y,<μ…>`, then one row per X-kernel.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "mu_x\\mu_y")?;
        for mu in &self.mus {
            write!(out, ",{mu}")?;
        }
        writeln!(out)?;
        for (mu, row) in self.mus.iter().zip(&self.counts) {
            write!(out, "{mu}")?;
            for c in row {
                write!(out, ",{c}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Bins every pair by nearest kernel (ties to the larger μ) under both
/// trials and tallies the moves.
pub fn movement_heatmap(pairs: &[(u32, u32)], trial_x: &TrainedTrial, trial_y: &TrainedTrial) -> Result<MovementHeatmap> {
    if trial_x.kernels != trial_y.kernels {
        return Err(Error::KernelMismatch);
    }
    if trial_x.vocab_size() != trial_y.vocab_size() {
        return Err(Error::VocabMismatch {
            expected: trial_x.vocab_size(),
            found: trial_y.vocab_size(),
        });
    }
    let ids = || pairs.iter().flat_map(|&(a, b)| [a, b]);
    check_ids(ids(), &trial_x.embeddings)?;
    let bank: &KernelBank = &trial_x.kernels;
    let bin = |t: &TrainedTrial, a: u32, b: u32| bank.nearest(cosine(t.embeddings.row(a), t.embeddings.row(b)));
    let mut counts = vec![vec![0u64; bank.len()]; bank.len()];
    for &(a, b) in pairs {
        counts[bin(trial_x, a, b)][bin(trial_y, a, b)] += 1;
    }
    Ok(MovementHeatmap {
        mus: bank.mus().to_vec(),
        counts,
    })
}
