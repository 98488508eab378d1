//! Ranking metrics and cross-trial summaries.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rayon::prelude::*;

use crate::data::{LabelSet, QueryGroup};
use crate::error::{Error, Result};
use crate::model::{rank, Scorer};

/// Documents of one query ordered best first.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<(String, f64)>,
}

impl RankedList {
    /// Sorts by descending score, breaking ties by ascending doc id.
    pub fn from_scores(query_id: impl Into<String>, mut entries: Vec<(String, f64)>) -> Self {
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self {
            query_id: query_id.into(),
            entries,
        }
    }

    pub fn doc_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|(d, _)| d.as_str()).collect()
    }

    pub fn top(&self, k: usize) -> impl Iterator<Item = &str> {
        self.entries.iter().take(k).map(|(d, _)| d.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn dcg(gains: impl Iterator<Item = f64>, k: usize) -> f64 {
    gains
        .take(k)
        .enumerate()
        .map(|(r, g)| (2f64.powf(g) - 1.0) / ((r + 2) as f64).log2())
        .sum()
}

/// NDCG@k with gain `2^label − 1` and discount `log2(rank + 1)`.
///
/// The ideal ordering is taken over the labels of the ranked documents
/// (unlabelled documents count as 0). Returns 0 when the ideal DCG is 0.
pub fn ndcg_at_k(ranking: &RankedList, labels: &LabelSet, k: usize) -> f64 {
    assert!(k >= 1, "k must be at least 1");
    let query = labels.query(&ranking.query_id);
    let label = |d: &str| query.and_then(|q| q.get(d)).copied().unwrap_or(0.0);
    let gains: Vec<f64> = ranking.entries.iter().map(|(d, _)| label(d)).collect();
    let mut ideal = gains.clone();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg = dcg(ideal.into_iter(), k);
    if idcg == 0.0 {
        return 0.0;
    }
    dcg(gains.into_iter(), k) / idcg
}

/// Mean reciprocal rank plus the number of rankings that had no relevant
/// document and were left out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MrrOutcome {
    pub value: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

/// MRR of the first document labelled relevant (label ≥ 0.5) in each ranking.
pub fn mrr(rankings: &[RankedList], raw_labels: &LabelSet) -> MrrOutcome {
    let mut sum = 0.0;
    let mut evaluated = 0;
    let mut skipped = 0;
    for r in rankings {
        let relevant = raw_labels.query(&r.query_id).and_then(|q| {
            r.entries
                .iter()
                .position(|(d, _)| q.get(d).is_some_and(|&l| l >= 0.5))
        });
        match relevant {
            Some(pos) => {
                sum += 1.0 / (pos + 1) as f64;
                evaluated += 1;
            }
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} queries without a relevant document were excluded from MRR");
    }
    let value = if evaluated == 0 { 0.0 } else { sum / evaluated as f64 };
    MrrOutcome {
        value,
        evaluated,
        skipped,
    }
}

/// Which labels a ranking is judged against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LabelCondition {
    /// Clickthrough-rate labels, as used for training.
    Same,
    /// An independent labeler (the planted relevance for synthetic corpora).
    Diff,
    /// Single-click sessions, scored with MRR.
    Raw,
}

impl LabelCondition {
    pub const ALL: [LabelCondition; 3] = [LabelCondition::Same, LabelCondition::Diff, LabelCondition::Raw];

    pub fn metrics(self) -> Vec<Metric> {
        match self {
            LabelCondition::Same | LabelCondition::Diff => vec![Metric::Ndcg(1), Metric::Ndcg(3), Metric::Ndcg(10)],
            LabelCondition::Raw => vec![Metric::Mrr],
        }
    }
}

impl fmt::Display for LabelCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelCondition::Same => "SAME",
            LabelCondition::Diff => "DIFF",
            LabelCondition::Raw => "RAW",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Ndcg(usize),
    Mrr,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Ndcg(k) => write!(f, "NDCG@{k}"),
            Metric::Mrr => f.write_str("MRR"),
        }
    }
}

/// A metric under a label condition, e.g. `SAME NDCG@10`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MetricKey {
    pub condition: LabelCondition,
    pub metric: Metric,
}

impl MetricKey {
    pub fn new(condition: LabelCondition, metric: Metric) -> Self {
        Self { condition, metric }
    }
}

impl fmt::Display for MetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.condition, self.metric)
    }
}

pub type MetricMap = BTreeMap<MetricKey, f64>;

/// Label sources for the three testing conditions.
#[derive(Debug, Clone, Default)]
pub struct EvalLabels {
    pub same: Option<LabelSet>,
    pub diff: Option<LabelSet>,
    pub raw: Option<LabelSet>,
}

impl EvalLabels {
    pub fn get(&self, condition: LabelCondition) -> Option<&LabelSet> {
        match condition {
            LabelCondition::Same => self.same.as_ref(),
            LabelCondition::Diff => self.diff.as_ref(),
            LabelCondition::Raw => self.raw.as_ref(),
        }
        .filter(|l| !l.is_empty())
    }

    /// Conditions that have a usable label source.
    pub fn available(&self) -> Vec<LabelCondition> {
        LabelCondition::ALL.into_iter().filter(|&c| self.get(c).is_some()).collect()
    }
}

pub fn rank_all<S: Scorer + ?Sized>(scorer: &S, queries: &[QueryGroup]) -> Result<Vec<RankedList>> {
    queries
        .iter()
        .map(|q| rank(&q.query_id, &q.query_terms, &q.candidates, scorer))
        .collect()
}

/// Computes the metrics of `conditions` from precomputed rankings.
pub fn metrics_for_rankings(
    rankings: &[RankedList],
    labels: &EvalLabels,
    conditions: &[LabelCondition],
) -> Result<MetricMap> {
    let mut out = MetricMap::new();
    for &condition in conditions {
        let set = labels
            .get(condition)
            .ok_or_else(|| Error::Config(format!("no labels available for Testing-{condition}")))?;
        match condition {
            LabelCondition::Same | LabelCondition::Diff => {
                for metric in condition.metrics() {
                    let Metric::Ndcg(k) = metric else { unreachable!() };
                    let mean = if rankings.is_empty() {
                        0.0
                    } else {
                        rankings.iter().map(|r| ndcg_at_k(r, set, k)).sum::<f64>() / rankings.len() as f64
                    };
                    out.insert(MetricKey::new(condition, metric), mean);
                }
            }
            LabelCondition::Raw => {
                let judged: Vec<RankedList> = rankings
                    .iter()
                    .filter(|r| set.contains_query(&r.query_id))
                    .cloned()
                    .collect();
                let outcome = mrr(&judged, set);
                if outcome.evaluated == 0 {
                    return Err(Error::Config(
                        "no test query has a single-click relevant document".into(),
                    ));
                }
                out.insert(MetricKey::new(condition, Metric::Mrr), outcome.value);
            }
        }
    }
    Ok(out)
}

/// Ranks every query with `scorer` and scores the rankings under each
/// condition: NDCG@{1,3,10} for SAME and DIFF, MRR for RAW.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    queries: &[QueryGroup],
    labels: &EvalLabels,
    conditions: &[LabelCondition],
) -> Result<MetricMap> {
    for &c in conditions {
        if labels.get(c).is_none() {
            return Err(Error::Config(format!("no labels available for Testing-{c}")));
        }
    }
    metrics_for_rankings(&rank_all(scorer, queries)?, labels, conditions)
}

/// Evaluates each trial independently (in parallel), preserving input order.
pub fn evaluate_trials<S: Scorer>(
    trials: &[S],
    queries: &[QueryGroup],
    labels: &EvalLabels,
    conditions: &[LabelCondition],
) -> Result<Vec<MetricMap>> {
    trials
        .par_iter()
        .map(|t| evaluate(t, queries, labels, conditions))
        .collect()
}

/// Min / mean / max / population standard deviation of one metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        assert!(!values.is_empty(), "summary of no values");
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if min == max {
            return Summary { min, mean: min, max, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = (values.iter().sum::<f64>() / n).clamp(min, max);
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Summary {
            min,
            mean,
            max,
            std: var.sqrt(),
        }
    }
}

/// Per-metric summaries over a set of trials.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialStatistics {
    pub columns: Vec<(MetricKey, Summary)>,
}

impl TrialStatistics {
    pub fn get(&self, key: MetricKey) -> Option<Summary> {
        self.columns.iter().find(|(k, _)| *k == key).map(|(_, s)| *s)
    }

    /// Rows are min / mean / max / std; columns are metric × condition.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "statistic")?;
        for (k, _) in &self.columns {
            write!(out, ",{k}")?;
        }
        writeln!(out)?;
        let rows: [(&str, fn(&Summary) -> f64); 4] = [
            ("min", |s| s.min),
            ("mean", |s| s.mean),
            ("max", |s| s.max),
            ("std", |s| s.std),
        ];
        for (name, get) in rows {
            write!(out, "{name}")?;
            for (_, s) in &self.columns {
                write!(out, ",{:.4}", get(s))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Summarises per-trial metric maps. Every map must carry the same keys.
pub fn trial_statistics(per_trial: &[MetricMap]) -> Result<TrialStatistics> {
    let first = per_trial.first().ok_or(Error::TooFewTrials { needed: 1, got: 0 })?;
    let mut columns = Vec::new();
    for key in first.keys() {
        let values = per_trial
            .iter()
            .map(|m| m.get(key).copied())
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| Error::Config(format!("metric {key} missing for some trials")))?;
        columns.push((*key, Summary::of(&values)));
    }
    Ok(TrialStatistics { columns })
}
