//! Unweighted score-averaging ensembles of trials.

use std::borrow::Borrow;
use std::fmt;
use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::analysis::{Pattern, PatternAssignment};
use crate::data::QueryGroup;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalLabels, LabelCondition, MetricKey, MetricMap, Summary};
use crate::model::{Scorer, TrainedTrial};

/// Default number of base models per ensemble.
pub const DEFAULT_SIZE: usize = 10;
/// Default number of random constructions per method.
pub const DEFAULT_REPEATS: usize = 10;

/// Scores a pair with the arithmetic mean of its members' scores.
#[derive(Debug, Clone)]
pub struct Ensemble<'a> {
    members: Vec<&'a TrainedTrial>,
}

impl<'a> Ensemble<'a> {
    pub fn new(members: Vec<&'a TrainedTrial>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config("an ensemble needs at least one member".into()));
        }
        Ok(Self { members })
    }

    /// Members of `pool` at the indices listed in `spec`.
    pub fn from_spec<T: Borrow<TrainedTrial>>(pool: &'a [T], spec: &EnsembleSpec) -> Result<Self> {
        let members = spec
            .members
            .iter()
            .map(|&i| {
                pool.get(i)
                    .map(Borrow::borrow)
                    .ok_or_else(|| Error::Config(format!("ensemble member {i} outside a pool of {}", pool.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(members)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

impl Scorer for Ensemble<'_> {
    fn score(&self, query: &[u32], doc: &[u32]) -> Result<f64> {
        ensemble_score(query, doc, &self.members)
    }
}

pub fn ensemble_score(query: &[u32], doc: &[u32], members: &[&TrainedTrial]) -> Result<f64> {
    assert!(!members.is_empty(), "empty ensemble");
    let mut sum = 0.0;
    for m in members {
        sum += m.score(query, doc)?;
    }
    Ok(sum / members.len() as f64)
}

/// How ensemble members are drawn from a labelled pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selection {
    AllA,
    AllB,
    /// `a` Pattern-A and `b` Pattern-B members.
    Mixed { a: usize, b: usize },
    /// Any trials, regardless of pattern.
    Any,
    /// A fixed member list.
    Explicit,
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selection::AllA => f.write_str("ALL_A"),
            Selection::AllB => f.write_str("ALL_B"),
            Selection::Mixed { a, b } => write!(f, "MIXED({a},{b})"),
            Selection::Any => f.write_str("ANY"),
            Selection::Explicit => f.write_str("EXPLICIT"),
        }
    }
}

/// Indices (into the trial pool) of one ensemble's members.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnsembleSpec {
    pub members: Vec<usize>,
    pub selection: Selection,
    pub pool_seed: u64,
}

fn draw(rng: &mut ChaCha8Rng, pool: &[usize], amount: usize, pattern: Pattern) -> Result<Vec<usize>> {
    if amount > pool.len() {
        return Err(Error::InsufficientPool {
            pattern,
            needed: amount,
            available: pool.len(),
        });
    }
    Ok(sample(rng, pool.len(), amount).into_iter().map(|i| pool[i]).collect())
}

/// Draws `repeats` member lists without replacement.
///
/// `size` applies to [`Selection::AllA`], [`Selection::AllB`] and
/// [`Selection::Any`]; [`Selection::Mixed`] uses its own counts. Member lists
/// are sorted by pool index.
pub fn build_ensembles(
    assignment: &PatternAssignment,
    selection: &Selection,
    size: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<EnsembleSpec>> {
    let pool_a = assignment.members(Pattern::A);
    let pool_b = assignment.members(Pattern::B);
    let everyone: Vec<usize> = (0..assignment.labels.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let mut members = match *selection {
            Selection::AllA => draw(&mut rng, &pool_a, size, Pattern::A)?,
            Selection::AllB => draw(&mut rng, &pool_b, size, Pattern::B)?,
            Selection::Mixed { a, b } => {
                let mut m = draw(&mut rng, &pool_a, a, Pattern::A)?;
                m.extend(draw(&mut rng, &pool_b, b, Pattern::B)?);
                m
            }
            Selection::Any => {
                if size > everyone.len() {
                    return Err(Error::TooFewTrials { needed: size, got: everyone.len() });
                }
                draw(&mut rng, &everyone, size, Pattern::A)?
            }
            Selection::Explicit => {
                return Err(Error::Config("explicit ensembles are not drawn at random".into()));
            }
        };
        if members.is_empty() {
            return Err(Error::Config("an ensemble needs at least one member".into()));
        }
        members.sort_unstable();
        specs.push(EnsembleSpec {
            members,
            selection: selection.clone(),
            pool_seed: seed,
        });
    }
    Ok(specs)
}

fn metric_of<T: Borrow<TrainedTrial>>(
    pool: &[T],
    spec: &EnsembleSpec,
    queries: &[QueryGroup],
    labels: &EvalLabels,
    metric: MetricKey,
) -> Result<f64> {
    let ensemble = Ensemble::from_spec(pool, spec)?;
    let map = evaluate(&ensemble, queries, labels, &[metric.condition])?;
    map.get(&metric)
        .copied()
        .ok_or_else(|| Error::Config(format!("metric {metric} not produced")))
}

/// One cell of the pattern-mix grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub a: usize,
    pub b: usize,
    /// `None` for the empty (0, 0) ensemble.
    pub value: Option<Summary>,
    pub repeats: usize,
}

/// Evaluates ensembles of `a` Pattern-A and `b` Pattern-B trials for every
/// `a ≤ max_a`, `b ≤ max_b`, averaging `metric` over `repeats` draws.
#[allow(clippy::too_many_arguments)]
pub fn pattern_grid<T: Borrow<TrainedTrial> + Sync>(
    pool: &[T],
    assignment: &PatternAssignment,
    max_a: usize,
    max_b: usize,
    repeats: usize,
    seed: u64,
    queries: &[QueryGroup],
    labels: &EvalLabels,
    metric: MetricKey,
) -> Result<Vec<GridCell>> {
    let cells: Vec<(usize, usize)> = (0..=max_a).flat_map(|a| (0..=max_b).map(move |b| (a, b))).collect();
    cells
        .par_iter()
        .map(|&(a, b)| {
            if a + b == 0 {
                return Ok(GridCell { a, b, value: None, repeats: 0 });
            }
            let cell_seed = seed ^ ((a as u64) << 32 | b as u64);
            let specs = build_ensembles(assignment, &Selection::Mixed { a, b }, a + b, repeats, cell_seed)?;
            let values = specs
                .iter()
                .map(|s| metric_of(pool, s, queries, labels, metric))
                .collect::<Result<Vec<_>>>()?;
            Ok(GridCell {
                a,
                b,
                value: Some(Summary::of(&values)),
                repeats,
            })
        })
        .collect()
}

/// `m,n,metric,repeats,std` rows; the (0, 0) cell has empty metric fields.
pub fn write_grid_csv<W: Write>(cells: &[GridCell], mut out: W) -> Result<()> {
    writeln!(out, "m,n,metric,repeats,std")?;
    for c in cells {
        match &c.value {
            Some(s) => writeln!(out, "{},{},{:.4},{},{:.4}", c.a, c.b, s.mean, c.repeats, s.std)?,
            None => writeln!(out, "{},{},,{},", c.a, c.b, c.repeats)?,
        }
    }
    Ok(())
}

/// Relative change rounded to a whole percent, e.g. `+14%`.
pub fn percent_delta(base: f64, value: f64) -> String {
    if base == 0.0 {
        return "n/a".to_owned();
    }
    let pct = ((value - base) / base * 100.0).round() as i64;
    if pct >= 0 {
        format!("+{pct}%")
    } else {
        format!("{pct}%")
    }
}

/// A method row of the ensemble comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRow {
    pub name: String,
    pub selection: Selection,
    /// Mean metrics over the repeats, or why the method was skipped.
    pub outcome: std::result::Result<MetricMap, String>,
}

/// Base-model means next to Ensemble-A, -B and -A&B.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleComparison {
    pub base: MetricMap,
    pub rows: Vec<MethodRow>,
}

fn mean_maps(maps: &[MetricMap]) -> MetricMap {
    let mut out = MetricMap::new();
    for key in maps[0].keys() {
        out.insert(*key, maps.iter().map(|m| m[key]).sum::<f64>() / maps.len() as f64);
    }
    out
}

/// Builds the ensemble comparison: every method draws `repeats` ensembles of
/// `size` members (split evenly for A&B) and reports the mean metrics.
/// Methods the pool cannot supply are kept as skipped rows.
#[allow(clippy::too_many_arguments)]
pub fn compare_ensembles<T: Borrow<TrainedTrial> + Sync>(
    pool: &[T],
    assignment: &PatternAssignment,
    size: usize,
    repeats: usize,
    seed: u64,
    queries: &[QueryGroup],
    labels: &EvalLabels,
    conditions: &[LabelCondition],
) -> Result<EnsembleComparison> {
    let per_trial = pool
        .par_iter()
        .map(|t| evaluate(t.borrow(), queries, labels, conditions))
        .collect::<Result<Vec<_>>>()?;
    if per_trial.is_empty() {
        return Err(Error::TooFewTrials { needed: 1, got: 0 });
    }
    let base = mean_maps(&per_trial);
    let methods = [
        ("Ensemble-A", Selection::AllA),
        ("Ensemble-B", Selection::AllB),
        ("Ensemble-A&B", Selection::Mixed { a: size / 2, b: size - size / 2 }),
    ];
    let mut rows = Vec::new();
    for (i, (name, selection)) in methods.into_iter().enumerate() {
        let outcome = match build_ensembles(assignment, &selection, size, repeats, seed.wrapping_add(i as u64)) {
            Err(e @ Error::InsufficientPool { .. }) => Err(e.to_string()),
            Err(e) => return Err(e),
            Ok(specs) => {
                let maps = specs
                    .par_iter()
                    .map(|s| evaluate(&Ensemble::from_spec(pool, s)?, queries, labels, conditions))
                    .collect::<Result<Vec<_>>>()?;
                Ok(mean_maps(&maps))
            }
        };
        rows.push(MethodRow {
            name: name.to_owned(),
            selection,
            outcome,
        });
    }
    Ok(EnsembleComparison { base, rows })
}

impl EnsembleComparison {
    /// One row per model; ensemble cells read `value (delta)`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "model")?;
        for key in self.base.keys() {
            write!(out, ",{key}")?;
        }
        writeln!(out)?;
        write!(out, "Base (mean)")?;
        for v in self.base.values() {
            write!(out, ",{v:.4}")?;
        }
        writeln!(out)?;
        for row in &self.rows {
            write!(out, "{}", row.name)?;
            match &row.outcome {
                Ok(m) => {
                    for (key, base) in &self.base {
                        write!(out, ",{:.4} ({})", m[key], percent_delta(*base, m[key]))?;
                    }
                }
                Err(reason) => {
                    for _ in self.base.keys() {
                        write!(out, ",skipped: {reason}")?;
                    }
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::PatternLabel;
    use crate::model::KernelBank;
    use crate::training::init_trial;

    fn assignment(a: usize, b: usize) -> PatternAssignment {
        let labels = (0..a + b)
            .map(|i| PatternLabel {
                label: if i < a { Pattern::A } else { Pattern::B },
                score: 0.0,
            })
            .collect();
        PatternAssignment { labels, degenerate: false }
    }

    #[test]
    fn percent_delta_rounds_to_whole_percent() {
        assert_eq!(percent_delta(0.3547, 0.4035), "+14%");
        assert_eq!(percent_delta(0.5, 0.45), "-10%");
        assert_eq!(percent_delta(0.5, 0.5), "+0%");
        assert_eq!(percent_delta(0.0, 0.1), "n/a");
    }

    #[test]
    fn ensemble_scores_are_means() {
        let bank = KernelBank::default();
        let t1 = init_trial(8, 3, &bank, 1, 0.1);
        let t2 = init_trial(8, 3, &bank, 2, 0.1);
        let (q, d) = ([2, 3], [4, 5, 2]);
        let s1 = t1.score(&q, &d).unwrap();
        let s2 = t2.score(&q, &d).unwrap();
        assert_eq!(ensemble_score(&q, &d, &[&t1]).unwrap(), s1);
        assert!((ensemble_score(&q, &d, &[&t1, &t2]).unwrap() - (s1 + s2) / 2.0).abs() < 1e-15);
        assert!(Ensemble::new(vec![]).is_err());
    }

    #[test]
    fn mixed_selection_respects_counts() {
        let pool = assignment(25, 25);
        let specs = build_ensembles(&pool, &Selection::Mixed { a: 5, b: 5 }, 10, 10, 3).unwrap();
        assert_eq!(specs.len(), 10);
        for s in &specs {
            assert_eq!(s.members.iter().filter(|&&i| pool.labels[i].label == Pattern::A).count(), 5);
            assert_eq!(s.members.iter().filter(|&&i| pool.labels[i].label == Pattern::B).count(), 5);
            let mut dedup = s.members.clone();
            dedup.dedup();
            assert_eq!(dedup.len(), 10);
        }
        assert_eq!(specs, build_ensembles(&pool, &Selection::Mixed { a: 5, b: 5 }, 10, 10, 3).unwrap());
    }

    #[test]
    fn whole_pattern_pool_is_the_unique_selection() {
        let pool = assignment(4, 6);
        let specs = build_ensembles(&pool, &Selection::AllB, 6, 1, 0).unwrap();
        assert_eq!(specs[0].members, vec![4, 5, 6, 7, 8, 9]);
    }

    #[test]
    fn shortfall_names_the_pattern() {
        let pool = assignment(3, 6);
        match build_ensembles(&pool, &Selection::AllA, 5, 1, 0) {
            Err(Error::InsufficientPool { pattern: Pattern::A, needed: 5, available: 3 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
