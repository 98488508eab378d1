use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use knrm_core::analysis::{
    agreement_histogram, classify_patterns, movement_heatmap, sample_word_pairs, write_histograms_csv,
    write_patterns_csv, Pattern, PatternAssignment, PatternLabel,
};
use knrm_core::data::{
    dctr_labels, generate_synthetic_corpus, group_queries, load_click_log, raw_labels, read_labels,
    split_queries, write_click_log, write_labels, ClickLogRecord, LabelSet, QueryGroup, QuerySplit,
    VocabMode, Vocabulary,
};
use knrm_core::ensemble::{
    build_ensembles, compare_ensembles, pattern_grid, percent_delta, write_grid_csv, Ensemble, EnsembleSpec,
    Selection,
};
use knrm_core::eval::{evaluate, evaluate_trials, trial_statistics, EvalLabels, MetricMap};
use knrm_core::model::TrainedTrial;
use knrm_core::training::{init_trial, train_from, trial_seeds, LabeledQueries, TrainRun};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, Method};

const CLICKS: &str = "corpus/clicks.tsv";
const VOCAB: &str = "corpus/vocab.txt";
const TRUTH: &str = "corpus/truth.tsv";
const TRIALS: &str = "trials";
const MANIFEST: &str = "trials/manifest.csv";
const REPORT: &str = "report";

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating directory {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> knrm_core::Result<()>) -> Result<()> {
    let mut out = create(path)?;
    body(&mut out).with_context(|| format!("writing {}", path.display()))?;
    out.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn trial_id(index: usize) -> String {
    format!("trial-{index:03}")
}

pub fn gen(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let spec = config.synthetic_spec()?;
    let corpus = generate_synthetic_corpus(&spec)?;
    write_file(&out.join(CLICKS), |w| write_click_log(&corpus.records, &corpus.vocab, w))?;
    write_file(&out.join(VOCAB), |w| corpus.vocab.write_to(w))?;
    write_file(&out.join(TRUTH), |w| write_labels(&corpus.truth, w))?;
    log::info!(
        "wrote {} records over {} queries to {}",
        corpus.records.len(),
        spec.num_queries,
        out.join("corpus").display()
    );
    Ok(())
}

/// The corpus every later command works on, with its fixed query split.
struct Prepared {
    vocab: Vocabulary,
    groups: Vec<QueryGroup>,
    split: QuerySplit,
    dctr: LabelSet,
    raw: LabelSet,
    truth: Option<LabelSet>,
}

impl Prepared {
    fn load(config: &ExperimentConfig, out: &Path) -> Result<Self> {
        let (clicks, vocab_path, truth_path) = match &config.corpus.path {
            Some(p) => (
                config.resolve(p),
                config.corpus.vocab.as_ref().map(|v| config.resolve(v)),
                config.corpus.truth.as_ref().map(|t| config.resolve(t)),
            ),
            None => {
                let clicks = out.join(CLICKS);
                ensure!(clicks.is_file(), "{} not found; run `knrm gen` first", clicks.display());
                let truth = out.join(TRUTH);
                (clicks, Some(out.join(VOCAB)), truth.is_file().then_some(truth))
            }
        };
        let mode = match &vocab_path {
            Some(p) => VocabMode::Fixed(Vocabulary::load(p)?),
            None => VocabMode::Build,
        };
        let (records, vocab) = load_click_log(&clicks, mode)?;
        let truth = match truth_path {
            Some(p) => {
                let f = File::open(&p).with_context(|| format!("opening {}", p.display()))?;
                Some(LabelSet::from_pairs(&read_labels(f).with_context(|| format!("reading {}", p.display()))?))
            }
            None => None,
        };
        Self::from_records(config, &records, vocab, truth)
    }

    fn from_records(
        config: &ExperimentConfig,
        records: &[ClickLogRecord],
        vocab: Vocabulary,
        truth: Option<LabelSet>,
    ) -> Result<Self> {
        let groups = group_queries(records);
        ensure!(!groups.is_empty(), "the click log has no records");
        let split = split_queries(
            &groups,
            config.corpus.validation_fraction,
            config.corpus.test_fraction,
            config.seed()?,
        )?;
        ensure!(!split.train.is_empty(), "the split leaves no training queries");
        Ok(Self {
            vocab,
            dctr: LabelSet::from_pairs(&dctr_labels(records)),
            raw: LabelSet::from_pairs(&raw_labels(records)),
            truth,
            groups,
            split,
        })
    }

    /// Labels for the test queries. RAW is dropped when no test query has a
    /// single-click document.
    fn test_labels(&self) -> EvalLabels {
        let test_has_raw = self.split.test.iter().any(|q| self.raw.contains_query(&q.query_id));
        if !test_has_raw {
            log::warn!("no test query has a single-clicked document; skipping Testing-RAW");
        }
        EvalLabels {
            same: Some(self.dctr.clone()),
            diff: self.truth.clone(),
            raw: test_has_raw.then(|| self.raw.clone()),
        }
    }
}

pub fn train(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = Prepared::load(config, out)?;
    ensure!(!data.split.validation.is_empty(), "the split leaves no validation queries");
    let bank = config.kernel_bank()?;
    let seeds = trial_seeds(config.seed()?, config.experiment.trials);
    let pretrained = match &config.train.embeddings {
        Some(p) => {
            let p = config.resolve(p);
            Some(fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)
        }
        None => None,
    };
    let train_set = LabeledQueries { queries: &data.split.train, labels: &data.dctr };
    let val_set = LabeledQueries { queries: &data.split.validation, labels: &data.dctr };
    log::info!(
        "training {} trials on {} queries ({} validation)",
        seeds.len(),
        data.split.train.len(),
        data.split.validation.len()
    );

    let runs: Vec<Result<TrainRun>> = seeds
        .par_iter()
        .map(|&seed| {
            let tc = config.train_config(seed);
            tc.validate()?;
            let mut init = init_trial(data.vocab.size(), tc.embedding_dim, &bank, seed, tc.init_scale);
            if let Some(text) = &pretrained {
                let n = init.embeddings.load_word_vectors(text.as_bytes(), &data.vocab)?;
                log::debug!("seed {seed}: {n} pretrained rows");
            }
            let run = train_from(train_set, val_set, init, &tc)?;
            log::info!(
                "seed {seed}: {} epochs, best epoch {}, val NDCG@10 {:.4}",
                run.epochs.len(),
                run.trial.epochs_trained,
                best_val(&run.trial)
            );
            Ok(run)
        })
        .collect();

    let dir = out.join(TRIALS);
    let mut manifest = create(&out.join(MANIFEST))?;
    writeln!(manifest, "trial_id,seed,status,epochs_trained,best_val_ndcg10,artifact,error")?;
    let mut failed = 0;
    for (i, (seed, run)) in seeds.iter().zip(runs).enumerate() {
        let id = trial_id(i);
        match run {
            Ok(run) => {
                let artifact = format!("{id}.knrm");
                run.trial.save(&dir.join(&artifact))?;
                write_file(&dir.join(format!("{id}.epochs.csv")), |w| run.write_epoch_log(w))?;
                writeln!(
                    manifest,
                    "{id},{seed},ok,{},{:.6},{artifact},",
                    run.trial.epochs_trained,
                    best_val(&run.trial)
                )?;
            }
            Err(e) => {
                failed += 1;
                log::error!("{id} (seed {seed}) failed: {e:#}");
                let msg = format!("{e:#}").replace(['\n', ','], " ");
                writeln!(manifest, "{id},{seed},failed,,,,{msg}")?;
            }
        }
    }
    manifest.flush()?;
    if failed > 0 {
        bail!("{failed} of {} trials failed; see {}", seeds.len(), out.join(MANIFEST).display());
    }
    Ok(())
}

fn best_val(trial: &TrainedTrial) -> f64 {
    trial.epochs_trained.checked_sub(1).map_or(0.0, |e| trial.validation_history[e])
}

/// Successfully trained trials listed in the manifest, in manifest order.
struct Pool {
    ids: Vec<String>,
    seeds: Vec<u64>,
    trials: Vec<TrainedTrial>,
}

impl Pool {
    fn load(out: &Path, vocab_size: usize) -> Result<Self> {
        let path = out.join(MANIFEST);
        let text = fs::read_to_string(&path)
            .with_context(|| format!("reading {}; run `knrm train` first", path.display()))?;
        let mut pool = Pool { ids: Vec::new(), seeds: Vec::new(), trials: Vec::new() };
        for (n, line) in text.lines().enumerate().skip(1) {
            let fields: Vec<&str> = line.splitn(7, ',').collect();
            ensure!(fields.len() == 7, "{}:{}: malformed manifest row", path.display(), n + 1);
            if fields[2] != "ok" {
                log::warn!("skipping {}: {}", fields[0], fields[2]);
                continue;
            }
            let seed = fields[1]
                .parse()
                .with_context(|| format!("{}:{}: bad seed", path.display(), n + 1))?;
            let artifact = out.join(TRIALS).join(fields[5]);
            let trial = TrainedTrial::load(&artifact, Some(vocab_size))
                .with_context(|| format!("loading {}", artifact.display()))?;
            pool.ids.push(fields[0].to_owned());
            pool.seeds.push(seed);
            pool.trials.push(trial);
        }
        ensure!(!pool.trials.is_empty(), "no successfully trained trials in {}", path.display());
        Ok(pool)
    }

    fn artifact(&self, index: usize) -> String {
        format!("{TRIALS}/{}.knrm", self.ids[index])
    }
}

fn write_trial_metrics(path: &Path, pool: &Pool, per_trial: &[MetricMap]) -> Result<()> {
    let mut w = create(path)?;
    write!(w, "trial_id,seed")?;
    for key in per_trial[0].keys() {
        write!(w, ",{key}")?;
    }
    writeln!(w)?;
    for ((id, seed), m) in pool.ids.iter().zip(&pool.seeds).zip(per_trial) {
        write!(w, "{id},{seed}")?;
        for v in m.values() {
            write!(w, ",{v:.6}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-trial test metrics and their min/mean/max/std table.
fn evaluate_pool(data: &Prepared, pool: &Pool, labels: &EvalLabels, out: &Path) -> Result<()> {
    let conditions = labels.available();
    let per_trial = evaluate_trials(&pool.trials, &data.split.test, labels, &conditions)?;
    write_trial_metrics(&out.join(REPORT).join("trial_metrics.csv"), pool, &per_trial)?;
    let stats = trial_statistics(&per_trial)?;
    write_file(&out.join(REPORT).join("statistics.csv"), |w| stats.write_csv(w))?;
    for (key, s) in &stats.columns {
        log::info!("{key}: mean {:.4} std {:.4} (min {:.4}, max {:.4})", s.mean, s.std, s.min, s.max);
    }
    Ok(())
}

pub fn eval(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = Prepared::load(config, out)?;
    ensure!(!data.split.test.is_empty(), "the split leaves no test queries");
    let pool = Pool::load(out, data.vocab.size())?;
    evaluate_pool(&data, &pool, &data.test_labels(), out)
}

pub fn report(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = Prepared::load(config, out)?;
    ensure!(!data.split.test.is_empty(), "the split leaves no test queries");
    let pool = Pool::load(out, data.vocab.size())?;
    let labels = data.test_labels();
    let dir = out.join(REPORT);
    evaluate_pool(&data, &pool, &labels, out)?;

    let mut skips: Vec<(&str, String)> = Vec::new();
    let n = pool.trials.len();
    if n < 2 {
        let reason = format!("needs at least 2 trials, found {n}");
        for section in ["agreement", "patterns", "heatmaps", "ensembles", "grid"] {
            log::warn!("skipping {section}: {reason}");
            skips.push((section, reason.clone()));
        }
    } else {
        let test = &data.split.test;
        let hists = config
            .analysis
            .agreement_k
            .iter()
            .map(|&k| agreement_histogram(&pool.trials, test, k))
            .collect::<knrm_core::Result<Vec<_>>>()?;
        for h in &hists {
            log::info!(
                "agreement k={}: {:.1}% of queries with 2+ distinct documents",
                h.k,
                100.0 * h.fraction_at_least(2)
            );
        }
        write_file(&dir.join("agreement.csv"), |w| write_histograms_csv(&hists, w))?;

        let assignment = classify_patterns(&pool.trials)?;
        if assignment.degenerate {
            log::warn!("all trials share one weight profile; every trial is labelled A");
        }
        log::info!(
            "patterns: {} A, {} B",
            assignment.count(Pattern::A),
            assignment.count(Pattern::B)
        );
        write_file(&dir.join("patterns.csv"), |w| {
            write_patterns_csv(&pool.ids, &pool.seeds, &assignment, w)
        })?;

        for (x, y) in heatmap_pairs(config, &assignment, n)? {
            let pairs = sample_word_pairs(&data.groups, config.pair_sampling(), &pool.trials[x], config.seed()?)?;
            let map = movement_heatmap(&pairs, &pool.trials[x], &pool.trials[y])?;
            log::info!(
                "heat map {} vs {}: {:.1}% of {} pairs stay in their bin",
                pool.ids[x],
                pool.ids[y],
                100.0 * map.diagonal_fraction(),
                map.total()
            );
            let name = format!("heatmap-{}-{}.csv", pool.ids[x], pool.ids[y]);
            write_file(&dir.join(name), |w| map.write_csv(w))?;
        }

        let e = &config.ensemble;
        let comparison = compare_ensembles(
            &pool.trials,
            &assignment,
            e.size,
            e.repeats,
            config.seed()?,
            test,
            &labels,
            &labels.available(),
        )?;
        for row in &comparison.rows {
            if let Err(reason) = &row.outcome {
                log::warn!("skipping {}: {reason}", row.name);
                skips.push(("ensembles", format!("{}: {reason}", row.name)));
            }
        }
        write_file(&dir.join("ensembles.csv"), |w| comparison.write_csv(w))?;

        let metric = config.grid_metric(&labels.available())?;
        if labels.get(metric.condition).is_none() {
            let reason = format!("no labels for {metric}");
            log::warn!("skipping grid: {reason}");
            skips.push(("grid", reason));
        } else {
            let max_a = e.grid_max.min(assignment.count(Pattern::A));
            let max_b = e.grid_max.min(assignment.count(Pattern::B));
            let cells = pattern_grid(
                &pool.trials,
                &assignment,
                max_a,
                max_b,
                e.repeats,
                config.seed()?,
                test,
                &labels,
                metric,
            )?;
            write_file(&dir.join("grid.csv"), |w| write_grid_csv(&cells, w))?;
        }
    }

    let mut w = create(&dir.join("skipped.csv"))?;
    writeln!(w, "section,reason")?;
    for (section, reason) in skips {
        writeln!(w, "{section},{}", reason.replace(',', ";"))?;
    }
    w.flush()?;
    Ok(())
}

/// Configured heat map pairs, or by default the first Pattern-A trial
/// against the next A trial and against the first B trial.
fn heatmap_pairs(config: &ExperimentConfig, assignment: &PatternAssignment, n: usize) -> Result<Vec<(usize, usize)>> {
    if !config.analysis.heatmaps.is_empty() {
        let pairs: Vec<(usize, usize)> = config.analysis.heatmaps.iter().map(|&[x, y]| (x, y)).collect();
        for &(x, y) in &pairs {
            ensure!(x < n && y < n, "heat map pair ({x}, {y}) is out of range for {n} trials");
        }
        return Ok(pairs);
    }
    let a = assignment.members(Pattern::A);
    let b = assignment.members(Pattern::B);
    let mut pairs = Vec::new();
    if a.len() >= 2 {
        pairs.push((a[0], a[1]));
    }
    if let (Some(&x), Some(&y)) = (a.first(), b.first()) {
        pairs.push((x, y));
    }
    if pairs.is_empty() {
        pairs.push((0, 1));
    }
    Ok(pairs)
}

pub fn ensemble(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = Prepared::load(config, out)?;
    ensure!(!data.split.test.is_empty(), "the split leaves no test queries");
    let pool = Pool::load(out, data.vocab.size())?;
    let labels = data.test_labels();
    let conditions = labels.available();
    let e = &config.ensemble;
    let seed = config.seed()?;
    let n = pool.trials.len();

    let method = config.selection_method()?;
    let assignment = match method {
        Method::AllA | Method::AllB | Method::Mixed => {
            ensure!(n >= 2, "pattern-based ensembles need at least 2 trials, found {n}");
            classify_patterns(&pool.trials)?
        }
        Method::Any | Method::Explicit => PatternAssignment {
            labels: vec![PatternLabel { label: Pattern::A, score: 0.0 }; n],
            degenerate: true,
        },
    };
    let specs = match method {
        Method::AllA => build_ensembles(&assignment, &Selection::AllA, e.size, e.repeats, seed)?,
        Method::AllB => build_ensembles(&assignment, &Selection::AllB, e.size, e.repeats, seed)?,
        Method::Mixed => {
            let selection = Selection::Mixed { a: e.mix[0], b: e.mix[1] };
            build_ensembles(&assignment, &selection, e.size, e.repeats, seed)?
        }
        Method::Any => build_ensembles(&assignment, &Selection::Any, e.size, e.repeats, seed)?,
        Method::Explicit => {
            for &m in &e.members {
                ensure!(m < n, "ensemble member {m} is out of range for {n} trials");
            }
            let mut members = e.members.clone();
            members.sort_unstable();
            vec![EnsembleSpec { members, selection: Selection::Explicit, pool_seed: seed }]
        }
    };

    let per_trial = evaluate_trials(&pool.trials, &data.split.test, &labels, &conditions)?;
    let results = specs
        .par_iter()
        .map(|s| evaluate(&Ensemble::from_spec(&pool.trials, s)?, &data.split.test, &labels, &conditions))
        .collect::<knrm_core::Result<Vec<_>>>()?;

    let dir = out.join("ensemble");
    let mut manifest = create(&dir.join("manifest.tsv"))?;
    writeln!(manifest, "ensemble\tselection\tpool_seed\tmembers")?;
    for (i, s) in specs.iter().enumerate() {
        let paths: Vec<String> = s.members.iter().map(|&m| pool.artifact(m)).collect();
        writeln!(manifest, "ens-{i:02}\t{}\t{}\t{}", s.selection, s.pool_seed, paths.join(" "))?;
    }
    manifest.flush()?;

    let mut w = create(&dir.join("metrics.csv"))?;
    write!(w, "ensemble,selection,size")?;
    for key in per_trial[0].keys() {
        write!(w, ",{key}")?;
    }
    writeln!(w)?;
    for (i, (s, m)) in specs.iter().zip(&results).enumerate() {
        write!(w, "ens-{i:02},{},{}", s.selection, s.members.len())?;
        for (key, v) in m {
            // Delta against the mean of this ensemble's own members.
            let base = s.members.iter().map(|&j| per_trial[j][key]).sum::<f64>() / s.members.len() as f64;
            write!(w, ",{v:.4} ({})", percent_delta(base, *v))?;
        }
        writeln!(w)?;
        log::info!("ens-{i:02} {}: {}", s.selection, summary_line(m));
    }
    w.flush()?;
    Ok(())
}

fn summary_line(m: &MetricMap) -> String {
    m.iter().map(|(k, v)| format!("{k} {v:.4}")).collect::<Vec<_>>().join(", ")
}

/// Where outputs go: `--out`, else `experiment.output` beside the config.
pub fn output_dir(config: &ExperimentConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.unwrap_or_else(|| config.resolve(&config.experiment.output))
}
