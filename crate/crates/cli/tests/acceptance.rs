//! Acceptance suite: one check per criterion, each printing a PASS/FAIL line.
//!
//! Criteria 5, 7, 8 and 9 share one pool of 20 trials trained on the default
//! synthetic corpus; criterion 4 drives the `knrm` binary.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use knrm_core::analysis::{
    agreement_histogram, classify_patterns, movement_heatmap, sample_word_pairs, PairSampling, Pattern,
};
use knrm_core::data::{
    dctr_labels, generate_synthetic_corpus, group_queries, raw_labels, split_queries, Candidate, LabelSet,
    LabeledPair, QueryGroup, SyntheticCorpusSpec,
};
use knrm_core::ensemble::{
    build_ensembles, compare_ensembles, pattern_grid, percent_delta, Ensemble, GridCell, Selection,
};
use knrm_core::eval::{
    evaluate, evaluate_trials, mrr, ndcg_at_k, rank_all, EvalLabels, LabelCondition, Metric, MetricKey, RankedList,
};
use knrm_core::model::{kernel_pool, EmbeddingTable, KernelBank, RankingWeights, Scorer, TrainedTrial, TranslationMatrix};
use knrm_core::training::{gradients, run_trials, trial_seeds, LabeledQueries, TrainConfig};
use knrm_core::Result as CoreResult;
use rand::Rng;
use support::{max_fd_error, naive_kernel_pool, near_boundary, random_instance, seeded};

type Outcome = Result<String, String>;

/// Prints the verdict straight to stderr so it shows without `--nocapture`.
fn report(n: u32, name: &str, outcome: &Outcome) {
    let (tag, detail) = match outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    let line = format!("acceptance criterion {n} [{tag}] {name}: {detail}\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn check(n: u32, name: &str, f: impl FnOnce() -> Outcome) {
    let outcome = f();
    report(n, name, &outcome);
    if let Err(detail) = outcome {
        panic!("criterion {n} ({name}) failed: {detail}");
    }
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

#[test]
fn criterion_1_gradient_oracle() {
    check(1, "gradient oracle", || {
        let start = Instant::now();
        let mut rng = seeded(20_241);
        let (mut checked, mut skipped) = (0, 0);
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let (trial, batch) = random_instance(&mut rng);
            if near_boundary(&batch, &trial, 1.0) {
                skipped += 1;
                continue;
            }
            let g = gradients(&batch, &trial, 1.0).map_err(|e| e.to_string())?;
            worst = worst.max(max_fd_error(&batch, &trial, 1.0, &g, 1e-5));
            checked += 1;
        }
        let elapsed = start.elapsed();
        verdict(
            checked >= 50 && worst < 1e-4 && elapsed < Duration::from_secs(10),
            format!("{checked} instances checked ({skipped} near a boundary), max rel error {worst:.2e}, {elapsed:.2?}"),
        )
    });
}

#[test]
fn criterion_2_kernel_pool_oracle() {
    check(2, "kernel-pool oracle", || {
        let start = Instant::now();
        let mut rng = seeded(77);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let rows = rng.random_range(1..=5);
            let cols = rng.random_range(1..=7);
            let m: Vec<Vec<f64>> =
                (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-1.0..=1.0)).collect()).collect();
            let k = rng.random_range(1..=11);
            let mus: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let sigmas: Vec<f64> = (0..k).map(|_| rng.random_range(1e-3..=1.0)).collect();
            let bank = KernelBank::new(mus.clone(), sigmas.clone()).map_err(|e| e.to_string())?;
            let got = kernel_pool(&TranslationMatrix::from_rows(&m), &bank).0;
            for (g, w) in got.iter().zip(naive_kernel_pool(&m, &mus, &sigmas)) {
                worst = worst.max((g - w).abs() / w.abs().max(f64::MIN_POSITIVE));
            }
        }
        let elapsed = start.elapsed();
        verdict(
            worst <= 1e-12 && elapsed < Duration::from_secs(5),
            format!("1000 matrices, max rel error {worst:.2e}, {elapsed:.2?}"),
        )
    });
}

fn ranked(scores: &[(&str, f64)]) -> RankedList {
    RankedList::from_scores("q", scores.iter().map(|(d, s)| (d.to_string(), *s)).collect())
}

fn labels(pairs: &[(&str, &str, f64)]) -> LabelSet {
    let v: Vec<LabeledPair> = pairs.iter().map(|(q, d, l)| LabeledPair::new(*q, *d, *l)).collect();
    LabelSet::from_pairs(&v)
}

/// Scores a document by the label attached to its single token.
struct Oracle(HashMap<u32, f64>);

impl Scorer for Oracle {
    fn score(&self, _query: &[u32], doc: &[u32]) -> CoreResult<f64> {
        Ok(self.0[&doc[0]])
    }
}

#[test]
fn criterion_3_metric_oracles() {
    check(3, "metric oracles", || {
        let mut notes = Vec::new();
        let mut ok = true;
        let mut expect = |name: &str, got: f64, want: f64| {
            let good = (got - want).abs() <= 1e-9;
            ok &= good;
            notes.push(format!("{name} {got:.6}{}", if good { "" } else { " (wrong)" }));
        };

        let two = labels(&[("q", "a", 0.0), ("q", "b", 1.0)]);
        expect("reversed pair", ndcg_at_k(&ranked(&[("a", 2.0), ("b", 1.0)]), &two, 10), 1.0 / 3f64.log2());
        expect("ideal order", ndcg_at_k(&ranked(&[("b", 2.0), ("a", 1.0)]), &two, 10), 1.0);
        let zeros = labels(&[("q", "a", 0.0), ("q", "b", 0.0)]);
        expect("all zero", ndcg_at_k(&ranked(&[("a", 2.0), ("b", 1.0)]), &zeros, 10), 0.0);

        let raw = labels(&[("q1", "x", 1.0), ("q1", "y", 0.0), ("q2", "u", 0.0), ("q2", "v", 0.0), ("q2", "w", 0.0), ("q2", "z", 1.0)]);
        let r1 = RankedList::from_scores("q1", vec![("x".into(), 0.9), ("y".into(), 0.1)]);
        let r2 = RankedList::from_scores(
            "q2",
            vec![("u".into(), 0.9), ("v".into(), 0.8), ("w".into(), 0.7), ("z".into(), 0.6)],
        );
        expect("MRR ranks 1 and 4", mrr(&[r1.clone(), r2], &raw).value, 0.625);
        let r3 = RankedList::from_scores("q2", vec![("u".into(), 0.9), ("v".into(), 0.8), ("z".into(), 0.7), ("w".into(), 0.1)]);
        expect("MRR rank 3", mrr(&[r3], &raw).value, 1.0 / 3.0);
        expect("MRR all first", mrr(&[r1], &raw).value, 1.0);

        // Perfect oracle over a small graded query set.
        let grades = [0.0, 0.1, 0.35, 0.35, 0.6, 0.8, 0.95, 1.0, 0.2, 0.5, 0.05, 0.7];
        let mut table = HashMap::new();
        let mut pairs = Vec::new();
        let mut groups = Vec::new();
        for q in 0..3 {
            let qid = format!("q{q}");
            let mut candidates = Vec::new();
            for (d, g) in grades.iter().enumerate() {
                let token = (2 + q * grades.len() + d) as u32;
                let label = (g + 0.1 * q as f64).min(1.0);
                table.insert(token, label);
                let doc_id = format!("{qid}-d{d:02}");
                pairs.push(LabeledPair::new(&qid, &doc_id, label));
                candidates.push(Candidate { doc_id, terms: vec![token] });
            }
            groups.push(QueryGroup { query_id: qid, query_terms: vec![1], candidates });
        }
        let set = LabelSet::from_pairs(&pairs);
        let rankings = rank_all(&Oracle(table), &groups).map_err(|e| e.to_string())?;
        let mut perfect = true;
        for r in &rankings {
            for k in 1..=12 {
                perfect &= ndcg_at_k(r, &set, k) == 1.0;
            }
        }
        ok &= perfect;
        notes.push(format!("perfect oracle NDCG@1..12 exactly 1: {perfect}"));
        verdict(ok, notes.join(", "))
    });
}

fn knrm(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_knrm"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("knrm {args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_4_determinism() {
    check(4, "determinism", || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let d = dir.path();
        fs::write(d.join("exp.toml"), "[experiment]\nseed = 2017\ntrials = 10\n").map_err(|e| e.to_string())?;
        let mut first_run = Duration::ZERO;
        for run in ["a", "b"] {
            let start = Instant::now();
            for cmd in ["gen", "train", "report"] {
                knrm(d, &[cmd, "--config", "exp.toml", "--out", run])?;
            }
            if run == "a" {
                first_run = start.elapsed();
            }
        }
        let (a, b) = (tree(&d.join("a")), tree(&d.join("b")));
        let artifacts = a.iter().filter(|(p, _)| p.ends_with(".knrm")).count();
        let reports = a.iter().filter(|(p, _)| p.starts_with("report")).count();
        let same_listing = a.iter().map(|(p, _)| p).eq(b.iter().map(|(p, _)| p));
        let differing: Vec<&str> = a
            .iter()
            .zip(&b)
            .filter(|(x, y)| x.1 != y.1)
            .map(|(x, _)| x.0.as_str())
            .collect();
        verdict(
            same_listing && differing.is_empty() && artifacts == 10 && first_run < Duration::from_secs(600),
            format!(
                "{} files ({artifacts} trial artifacts, {reports} report files) byte-identical: {}; differing {differing:?}; \
                 gen+train+report on the default corpus took {first_run:.1?} with {} worker(s)",
                a.len(),
                same_listing && differing.is_empty(),
                rayon::current_num_threads()
            ),
        )
    });
}

/// Twenty trials on the default synthetic corpus and the test labels.
struct Fixture {
    trials: Vec<TrainedTrial>,
    groups: Vec<QueryGroup>,
    test: Vec<QueryGroup>,
    labels: EvalLabels,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let seed = 2017;
        let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec { seed, ..Default::default() }).unwrap();
        let groups = group_queries(&corpus.records);
        let split = split_queries(&groups, 0.1, 0.2, seed).unwrap();
        let dctr = LabelSet::from_pairs(&dctr_labels(&corpus.records));
        let runs = run_trials(
            LabeledQueries { queries: &split.train, labels: &dctr },
            LabeledQueries { queries: &split.validation, labels: &dctr },
            corpus.vocab.size(),
            &KernelBank::default(),
            &TrainConfig::default(),
            &trial_seeds(seed, 20),
        );
        let trials = runs.into_iter().map(|r| r.unwrap().trial).collect();
        Fixture {
            trials,
            groups,
            test: split.test,
            labels: EvalLabels {
                same: Some(dctr),
                diff: Some(LabelSet::from_pairs(&corpus.truth)),
                raw: Some(LabelSet::from_pairs(&raw_labels(&corpus.records))),
            },
        }
    })
}

const DIFF_NDCG10: MetricKey = MetricKey { condition: LabelCondition::Diff, metric: Metric::Ndcg(10) };
const SAME_NDCG10: MetricKey = MetricKey { condition: LabelCondition::Same, metric: Metric::Ndcg(10) };
const RAW_MRR: MetricKey = MetricKey { condition: LabelCondition::Raw, metric: Metric::Mrr };

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

#[test]
fn criterion_5_variance_reproduction() {
    check(5, "variance reproduction", || {
        let f = fixture();
        let conditions = [LabelCondition::Same, LabelCondition::Diff];
        let per_trial = evaluate_trials(&f.trials, &f.test, &f.labels, &conditions).map_err(|e| e.to_string())?;
        let mut ok = true;
        let mut notes = Vec::new();
        for key in [SAME_NDCG10, DIFF_NDCG10] {
            let values: Vec<f64> = per_trial.iter().map(|m| m[&key]).collect();
            let (mean, std) = mean_std(&values);
            ok &= std > 0.0 && std / mean < 0.10;
            notes.push(format!("{key} mean {mean:.4} std {std:.4} (rel {:.2}%)", 100.0 * std / mean));
        }
        let h = agreement_histogram(&f.trials, &f.test, 1).map_err(|e| e.to_string())?;
        let frac = h.fraction_at_least(2);
        ok &= frac >= 0.25;
        notes.push(format!("k=1 queries with 2+ distinct docs {:.1}%", 100.0 * frac));
        verdict(ok, notes.join("; "))
    });
}

fn trial_with_weights(soft: &[f64]) -> TrainedTrial {
    let mut w = vec![0.3];
    w.extend_from_slice(soft);
    TrainedTrial {
        embeddings: EmbeddingTable::zeros(4, 2),
        weights: RankingWeights { w, b: 0.0 },
        kernels: KernelBank::default(),
        seed: 0,
        epochs_trained: 0,
        validation_history: Vec::new(),
    }
}

#[test]
fn criterion_6_pattern_detection() {
    check(6, "pattern detection", || {
        // Soft-kernel weights from μ = 0.9 down to −0.9.
        let downward = [0.8, 0.3, 0.1, 0.0, -0.1, -0.2, -0.2, -0.3, -0.3, -0.4];
        let upward = [0.1, 0.7, 0.5, 0.3, 0.0, -0.1, -0.3, -0.3, -0.4, -0.5];
        let mut rng = seeded(6);
        let mut pool = Vec::new();
        let mut truth = Vec::new();
        for i in 0..10 {
            let down = [0, 3, 4, 7, 9].contains(&i);
            let arch = if down { &downward } else { &upward };
            let noisy: Vec<f64> = arch.iter().map(|w| w * (1.0 + rng.random_range(-0.01..=0.01))).collect();
            pool.push(trial_with_weights(&noisy));
            truth.push(if down { Pattern::A } else { Pattern::B });
        }
        let got = classify_patterns(&pool).map_err(|e| e.to_string())?;
        let labels: Vec<Pattern> = got.labels.iter().map(|l| l.label).collect();
        let margin = got.labels.iter().map(|l| l.score.abs()).fold(f64::INFINITY, f64::min);
        verdict(
            labels == truth && !got.degenerate,
            format!("labels {labels:?}, expected {truth:?}, smallest |score| {margin:.3}"),
        )
    });
}

#[test]
fn criterion_7_heatmap_invariants() {
    check(7, "heat map invariants", || {
        let f = fixture();
        let mut rng = seeded(7);
        let mut notes = Vec::new();
        let mut ok = true;
        for round in 0..5 {
            let x = rng.random_range(0..f.trials.len());
            let y = (x + rng.random_range(1..f.trials.len())) % f.trials.len();
            let sampling = PairSampling { num_queries: 100, docs_per_query: 20, per_bin: 100 };
            let pairs = sample_word_pairs(&f.groups, sampling, &f.trials[x], round).map_err(|e| e.to_string())?;
            let xy = movement_heatmap(&pairs, &f.trials[x], &f.trials[y]).map_err(|e| e.to_string())?;
            let yx = movement_heatmap(&pairs, &f.trials[y], &f.trials[x]).map_err(|e| e.to_string())?;
            let xx = movement_heatmap(&pairs, &f.trials[x], &f.trials[x]).map_err(|e| e.to_string())?;
            let good = xx.is_diagonal()
                && xx.total() == pairs.len() as u64
                && xy.total() == pairs.len() as u64
                && xy.transpose() == yx;
            ok &= good;
            notes.push(format!("({x},{y}) {} pairs{}", pairs.len(), if good { "" } else { " VIOLATED" }));
        }
        verdict(ok, format!("self maps diagonal, totals conserved, transposes match on {}", notes.join(", ")))
    });
}

#[test]
fn criterion_8_ensemble_lift() {
    check(8, "ensemble lift", || {
        let f = fixture();
        let conditions = [LabelCondition::Diff];
        let per_trial = evaluate_trials(&f.trials, &f.test, &f.labels, &conditions).map_err(|e| e.to_string())?;
        let base: Vec<f64> = per_trial.iter().map(|m| m[&DIFF_NDCG10]).collect();
        let (base_mean, _) = mean_std(&base);
        let assignment = classify_patterns(&f.trials).map_err(|e| e.to_string())?;
        let specs = build_ensembles(&assignment, &Selection::Any, 10, 10, 8).map_err(|e| e.to_string())?;
        let mut wins = 0;
        let mut values = Vec::new();
        for s in &specs {
            let e = Ensemble::from_spec(&f.trials, s).map_err(|e| e.to_string())?;
            let v = evaluate(&e, &f.test, &f.labels, &conditions).map_err(|e| e.to_string())?[&DIFF_NDCG10];
            wins += usize::from(v >= base_mean);
            values.push(format!("{v:.4}"));
        }

        // The comparison table renders `value (delta)` with whole-percent deltas.
        let all = LabelCondition::ALL;
        let cmp = compare_ensembles(&f.trials, &assignment, 10, 10, 8, &f.test, &f.labels, &all)
            .map_err(|e| e.to_string())?;
        let mut csv = Vec::new();
        cmp.write_csv(&mut csv).map_err(|e| e.to_string())?;
        let csv = String::from_utf8(csv).map_err(|e| e.to_string())?;
        let mut table_ok = csv.lines().next()
            == Some("model,SAME NDCG@1,SAME NDCG@3,SAME NDCG@10,DIFF NDCG@1,DIFF NDCG@3,DIFF NDCG@10,RAW MRR");
        for (line, row) in csv.lines().skip(2).zip(&cmp.rows) {
            if let Ok(m) = &row.outcome {
                let cells: Vec<String> = cmp
                    .base
                    .iter()
                    .map(|(k, b)| format!("{:.4} ({})", m[k], percent_delta(*b, m[k])))
                    .collect();
                table_ok &= line == format!("{},{}", row.name, cells.join(","));
                for (k, b) in &cmp.base {
                    let pct = ((m[k] - b) / b * 100.0).round() as i64;
                    table_ok &= percent_delta(*b, m[k]).trim_start_matches('+') == format!("{pct}%");
                }
            }
        }
        table_ok &= percent_delta(0.3547, 0.4035) == "+14%";
        verdict(
            wins >= 9 && table_ok,
            format!(
                "{wins}/10 size-10 ensembles at or above the base mean {base_mean:.4} (DIFF NDCG@10: {}); table deltas correct: {table_ok}",
                values.join(" ")
            ),
        )
    });
}

fn mean_of(cells: &[GridCell], keep: impl Fn(&GridCell) -> bool) -> Option<f64> {
    let v: Vec<f64> = cells.iter().filter(|c| keep(c)).filter_map(|c| c.value.map(|s| s.mean)).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[test]
fn criterion_9_mixed_pattern_grid() {
    check(9, "mixed-pattern grid", || {
        let f = fixture();
        let assignment = classify_patterns(&f.trials).map_err(|e| e.to_string())?;
        let (na, nb) = (assignment.count(Pattern::A), assignment.count(Pattern::B));
        if na < 5 || nb < 5 {
            return Err(format!("pool split {na} A / {nb} B; the criterion needs 5 of each"));
        }
        let mut notes = vec![format!("patterns {na} A / {nb} B")];
        let mut ok = true;
        for metric in [RAW_MRR, DIFF_NDCG10] {
            let cells = pattern_grid(&f.trials, &assignment, na.min(6), nb.min(6), 10, 9, &f.test, &f.labels, metric)
                .map_err(|e| e.to_string())?;
            let mixed = mean_of(&cells, |c| c.a + c.b == 6 && c.a >= 1 && c.b >= 1);
            let pure = mean_of(&cells, |c| c.a + c.b == 6 && (c.a == 0 || c.b == 0));
            let (Some(mixed), Some(pure)) = (mixed, pure) else {
                return Err(format!("no size-6 cells for {metric}"));
            };
            ok &= mixed >= pure - 0.005;
            notes.push(format!(
                "{metric}: mixed {mixed:.4} vs pure {pure:.4} (strictly better: {})",
                mixed > pure
            ));
        }
        verdict(ok, notes.join("; "))
    });
}
