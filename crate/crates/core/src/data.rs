//! Click logs, vocabularies, relevance labels and the synthetic corpus.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Binomial, Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Padding id. Its embedding row is all-zero and never trained.
pub const PAD: u32 = 0;
/// Id assigned to tokens missing from a fixed vocabulary.
pub const UNK: u32 = 1;

const FIRST_TOKEN_ID: u32 = 2;

/// Token universe shared by queries and documents.
///
/// Corpus tokens get ids `2..=terms.len() + 1`; `0` and `1` are reserved for
/// [`PAD`] and [`UNK`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    terms: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a vocabulary from distinct tokens, in order.
    pub fn from_terms<I, S>(terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self::new();
        for (line, term) in terms.into_iter().enumerate() {
            let term = term.into();
            if vocab.index.contains_key(&term) {
                return Err(Error::parse(line + 1, format!("duplicate token {term:?}")));
            }
            vocab.insert(&term);
        }
        Ok(vocab)
    }

    /// Returns the id of `term`, adding it if unseen.
    pub fn insert(&mut self, term: &str) -> u32 {
        if let Some(&id) = self.index.get(term) {
            return id;
        }
        let id = FIRST_TOKEN_ID + self.terms.len() as u32;
        self.terms.push(term.to_owned());
        self.index.insert(term.to_owned(), id);
        id
    }

    pub fn id(&self, term: &str) -> Option<u32> {
        self.index.get(term).copied()
    }

    pub fn id_or_unk(&self, term: &str) -> u32 {
        self.id(term).unwrap_or(UNK)
    }

    pub fn term(&self, id: u32) -> Option<&str> {
        match id {
            PAD => Some("<pad>"),
            UNK => Some("<unk>"),
            _ => self
                .terms
                .get((id - FIRST_TOKEN_ID) as usize)
                .map(String::as_str),
        }
    }

    /// Corpus tokens in id order.
    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    /// Number of embedding rows needed: corpus tokens plus PAD and UNK.
    pub fn size(&self) -> usize {
        self.terms.len() + FIRST_TOKEN_ID as usize
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        for term in &self.terms {
            writeln!(out, "{term}")?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut terms = Vec::new();
        for (n, line) in BufReader::new(input).lines().enumerate() {
            let line = line?;
            let term = line.trim_end_matches('\r');
            if term.is_empty() || term.contains(char::is_whitespace) {
                return Err(Error::parse(n + 1, "vocabulary entries must be single tokens"));
            }
            terms.push(term.to_owned());
        }
        Self::from_terms(terms)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write_to(&mut out)?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(file)
    }
}

/// One query-document row of a click log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClickLogRecord {
    pub query_id: String,
    pub query_terms: Vec<u32>,
    pub doc_id: String,
    pub doc_terms: Vec<u32>,
    pub impressions: u64,
    pub clicks: u64,
    pub session_single_click: bool,
}

/// A graded (or binary) relevance judgement.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair {
    pub query_id: String,
    pub doc_id: String,
    pub label: f64,
}

impl LabeledPair {
    pub fn new(query_id: impl Into<String>, doc_id: impl Into<String>, label: f64) -> Self {
        Self {
            query_id: query_id.into(),
            doc_id: doc_id.into(),
            label,
        }
    }
}

/// How [`load_click_log`] maps tokens to ids.
#[derive(Debug, Clone)]
pub enum VocabMode {
    /// Grow a new vocabulary in first-seen order.
    Build,
    /// Use a fixed vocabulary; unseen tokens become [`UNK`].
    Fixed(Vocabulary),
}

pub fn load_click_log(path: &Path, vocab: VocabMode) -> Result<(Vec<ClickLogRecord>, Vocabulary)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_click_log(file, vocab)
}

/// Parses the seven-column click-log TSV.
pub fn read_click_log<R: Read>(
    input: R,
    vocab: VocabMode,
) -> Result<(Vec<ClickLogRecord>, Vocabulary)> {
    let (mut vocab, grow) = match vocab {
        VocabMode::Build => (Vocabulary::new(), true),
        VocabMode::Fixed(v) => (v, false),
    };
    let mut records = Vec::new();
    for (n, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        records.push(parse_record(line, n + 1, &mut vocab, grow)?);
    }
    Ok((records, vocab))
}

fn parse_record(line: &str, n: usize, vocab: &mut Vocabulary, grow: bool) -> Result<ClickLogRecord> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 7 {
        return Err(Error::parse(n, format!("expected 7 columns, found {}", cols.len())));
    }
    let mut tokens = |field: &str, what: &str| -> Result<Vec<u32>> {
        let ids: Vec<u32> = field
            .split_whitespace()
            .map(|t| if grow { vocab.insert(t) } else { vocab.id_or_unk(t) })
            .collect();
        if ids.is_empty() {
            return Err(Error::parse(n, format!("{what} has no tokens")));
        }
        Ok(ids)
    };
    let query_terms = tokens(cols[1], "query")?;
    let doc_terms = tokens(cols[3], "document")?;
    let count = |field: &str, what: &str| {
        field
            .trim()
            .parse::<u64>()
            .map_err(|_| Error::parse(n, format!("{what} is not a non-negative integer: {field:?}")))
    };
    let impressions = count(cols[4], "impressions")?;
    let clicks = count(cols[5], "clicks")?;
    if clicks > impressions {
        return Err(Error::parse(
            n,
            format!("clicks ({clicks}) exceed impressions ({impressions})"),
        ));
    }
    let session_single_click = match cols[6].trim() {
        "0" => false,
        "1" => true,
        other => return Err(Error::parse(n, format!("single-click flag must be 0 or 1, got {other:?}"))),
    };
    if cols[0].is_empty() || cols[2].is_empty() {
        return Err(Error::parse(n, "empty query or document id"));
    }
    Ok(ClickLogRecord {
        query_id: cols[0].to_owned(),
        query_terms,
        doc_id: cols[2].to_owned(),
        doc_terms,
        impressions,
        clicks,
        session_single_click,
    })
}

pub fn write_click_log<W: Write>(records: &[ClickLogRecord], vocab: &Vocabulary, mut out: W) -> Result<()> {
    let join = |ids: &[u32]| {
        ids.iter()
            .map(|&id| vocab.term(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    for r in records {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.query_id,
            join(&r.query_terms),
            r.doc_id,
            join(&r.doc_terms),
            r.impressions,
            r.clicks,
            u8::from(r.session_single_click)
        )?;
    }
    Ok(())
}

/// Graded labels from the clickthrough rate of each (query, document) pair.
///
/// Records are grouped by `(query_id, doc_id)`; the label is total clicks over
/// total impressions, or 0 for pairs never shown. Output is sorted by key.
pub fn dctr_labels(records: &[ClickLogRecord]) -> Vec<LabeledPair> {
    let mut totals: BTreeMap<(&str, &str), (u64, u64)> = BTreeMap::new();
    for r in records {
        let t = totals.entry((&r.query_id, &r.doc_id)).or_default();
        t.0 += r.clicks;
        t.1 += r.impressions;
    }
    totals
        .into_iter()
        .map(|((q, d), (clicks, impressions))| {
            let label = if impressions == 0 {
                0.0
            } else {
                clicks as f64 / impressions as f64
            };
            LabeledPair::new(q, d, label)
        })
        .collect()
}

/// Binary labels from single-click sessions.
///
/// A document is relevant when one of its records is a single-click session
/// with at least one click. Queries without such a document are dropped.
pub fn raw_labels(records: &[ClickLogRecord]) -> Vec<LabeledPair> {
    let mut by_query: BTreeMap<&str, BTreeMap<&str, bool>> = BTreeMap::new();
    for r in records {
        let hit = r.session_single_click && r.clicks >= 1;
        *by_query
            .entry(&r.query_id)
            .or_default()
            .entry(&r.doc_id)
            .or_default() |= hit;
    }
    by_query
        .into_iter()
        .filter(|(_, docs)| docs.values().any(|&hit| hit))
        .flat_map(|(q, docs)| {
            docs.into_iter()
                .map(move |(d, hit)| LabeledPair::new(q, d, if hit { 1.0 } else { 0.0 }))
        })
        .collect()
}

/// Labels indexed by query, then document.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelSet {
    by_query: BTreeMap<String, BTreeMap<String, f64>>,
}

impl LabelSet {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = &'a LabeledPair>) -> Self {
        let mut by_query: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for p in pairs {
            by_query
                .entry(p.query_id.clone())
                .or_default()
                .insert(p.doc_id.clone(), p.label);
        }
        Self { by_query }
    }

    pub fn get(&self, query_id: &str, doc_id: &str) -> Option<f64> {
        self.by_query.get(query_id)?.get(doc_id).copied()
    }

    pub fn query(&self, query_id: &str) -> Option<&BTreeMap<String, f64>> {
        self.by_query.get(query_id)
    }

    pub fn contains_query(&self, query_id: &str) -> bool {
        self.by_query.contains_key(query_id)
    }

    pub fn num_queries(&self) -> usize {
        self.by_query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_query.is_empty()
    }

    pub fn to_pairs(&self) -> Vec<LabeledPair> {
        self.by_query
            .iter()
            .flat_map(|(q, docs)| docs.iter().map(move |(d, &l)| LabeledPair::new(q.clone(), d.clone(), l)))
            .collect()
    }
}

pub fn write_labels<W: Write>(labels: &[LabeledPair], mut out: W) -> Result<()> {
    for p in labels {
        writeln!(out, "{}\t{}\t{:?}", p.query_id, p.doc_id, p.label)?;
    }
    Ok(())
}

/// Reads `query_id<TAB>doc_id<TAB>label` lines.
pub fn read_labels<R: Read>(input: R) -> Result<Vec<LabeledPair>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::parse(n + 1, format!("expected 3 columns, found {}", cols.len())));
        }
        let label: f64 = cols[2]
            .parse()
            .map_err(|_| Error::parse(n + 1, format!("bad label {:?}", cols[2])))?;
        if !(0.0..=1.0).contains(&label) {
            return Err(Error::parse(n + 1, format!("label {label} outside [0, 1]")));
        }
        out.push(LabeledPair::new(cols[0], cols[1], label));
    }
    Ok(out)
}

/// A document available for ranking under a query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub doc_id: String,
    pub terms: Vec<u32>,
}

/// A query with its candidate documents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryGroup {
    pub query_id: String,
    pub query_terms: Vec<u32>,
    pub candidates: Vec<Candidate>,
}

/// Collects records into per-query candidate lists, sorted by query id and
/// then document id. Repeated (query, document) rows keep the first terms seen.
pub fn group_queries(records: &[ClickLogRecord]) -> Vec<QueryGroup> {
    let mut groups: BTreeMap<&str, (&[u32], BTreeMap<&str, &[u32]>)> = BTreeMap::new();
    for r in records {
        let entry = groups
            .entry(&r.query_id)
            .or_insert_with(|| (&r.query_terms, BTreeMap::new()));
        entry.1.entry(&r.doc_id).or_insert(&r.doc_terms);
    }
    groups
        .into_iter()
        .map(|(q, (terms, docs))| QueryGroup {
            query_id: q.to_owned(),
            query_terms: terms.to_vec(),
            candidates: docs
                .into_iter()
                .map(|(d, t)| Candidate {
                    doc_id: d.to_owned(),
                    terms: t.to_vec(),
                })
                .collect(),
        })
        .collect()
}

/// Query-level train / validation / test partition.
#[derive(Debug, Clone, Default)]
pub struct QuerySplit {
    pub train: Vec<QueryGroup>,
    pub validation: Vec<QueryGroup>,
    pub test: Vec<QueryGroup>,
}

/// Shuffles queries with `seed` and carves off validation and test fractions.
/// Each part keeps the input's relative order.
pub fn split_queries(
    groups: &[QueryGroup],
    validation_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<QuerySplit> {
    let ok = |f: f64| (0.0..1.0).contains(&f);
    if !ok(validation_fraction) || !ok(test_fraction) || validation_fraction + test_fraction >= 1.0 {
        return Err(Error::Config(format!(
            "split fractions must be in [0, 1) and sum below 1 (validation {validation_fraction}, test {test_fraction})"
        )));
    }
    let n = groups.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    let n_val = (n as f64 * validation_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut part = vec![0u8; n];
    for &i in &order[..n_test] {
        part[i] = 2;
    }
    for &i in &order[n_test..(n_test + n_val).min(n)] {
        part[i] = 1;
    }
    let mut split = QuerySplit::default();
    for (g, p) in groups.iter().zip(part) {
        match p {
            0 => split.train.push(g.clone()),
            1 => split.validation.push(g.clone()),
            _ => split.test.push(g.clone()),
        }
    }
    Ok(split)
}

/// Parameters of the planted-relevance corpus generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpusSpec {
    pub vocab_size: usize,
    /// Dimension of the hidden token vectors that define true relevance.
    pub embedding_truth_dim: usize,
    pub num_queries: usize,
    pub docs_per_query: usize,
    /// Inclusive token-count range for queries.
    pub query_len_range: (usize, usize),
    /// Inclusive token-count range for documents.
    pub doc_len_range: (usize, usize),
    /// Standard deviation of the per-pair click propensity around the true
    /// relevance.
    pub relevance_noise: f64,
    pub seed: u64,
    /// Impressions recorded for every pair.
    pub impressions: u64,
    /// Number of latent topics the vocabulary is divided into.
    pub num_topics: usize,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 2000,
            embedding_truth_dim: 16,
            num_queries: 200,
            docs_per_query: 20,
            query_len_range: (2, 4),
            doc_len_range: (8, 16),
            relevance_noise: 0.05,
            seed: 1,
            impressions: 100,
            num_topics: 40,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embedding_truth_dim", self.embedding_truth_dim),
            ("num_queries", self.num_queries),
            ("docs_per_query", self.docs_per_query),
            ("impressions", self.impressions as usize),
            ("num_topics", self.num_topics),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, (lo, hi)) in [("query_len_range", self.query_len_range), ("doc_len_range", self.doc_len_range)] {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("{name} must be a nonempty interval of positive lengths")));
            }
        }
        if self.num_topics > self.vocab_size {
            return Err(Error::Config("num_topics cannot exceed vocab_size".into()));
        }
        if !(self.relevance_noise >= 0.0 && self.relevance_noise.is_finite()) {
            return Err(Error::Config("relevance_noise must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Output of [`generate_synthetic_corpus`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub records: Vec<ClickLogRecord>,
    pub vocab: Vocabulary,
    /// Planted relevance of every pair, independent of the click sample.
    pub truth: Vec<LabeledPair>,
}

// Mean positive affinity mapped linearly onto [0, 1] between these bounds.
const AFFINITY_FLOOR: f64 = 0.1;
const AFFINITY_CEIL: f64 = 0.7;

/// Builds a topic-structured corpus whose click behaviour follows a planted
/// relevance function.
///
/// Each token has a hidden unit vector near its topic centre. A pair's true
/// relevance is the mean positive cosine between query and document token
/// vectors, rescaled onto `[0, 1]`. Clicks are binomial draws whose
/// propensity is a mean-preserving Beta perturbation of that relevance.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.embedding_truth_dim;

    let centers: Vec<Vec<f64>> = (0..spec.num_topics)
        .map(|_| unit_gaussian(&mut rng, dim))
        .collect();
    let spread = 0.8;
    let vectors: Vec<Vec<f64>> = (0..spec.vocab_size)
        .map(|t| {
            let z = unit_gaussian(&mut rng, dim);
            let c = &centers[t % spec.num_topics];
            normalized(c.iter().zip(&z).map(|(a, b)| a + spread * b).collect())
        })
        .collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); spec.num_topics];
    for t in 0..spec.vocab_size {
        members[t % spec.num_topics].push(t);
    }

    let width = |n: usize| n.max(1).to_string().len();
    let (qw, dw) = (width(spec.num_queries - 1), width(spec.docs_per_query - 1));
    let vocab = Vocabulary::from_terms((0..spec.vocab_size).map(|t| format!("w{t}")))?;
    let id_of = |t: usize| FIRST_TOKEN_ID + t as u32;

    let mut records = Vec::with_capacity(spec.num_queries * spec.docs_per_query);
    let mut truth = Vec::with_capacity(records.capacity());
    for qi in 0..spec.num_queries {
        let query_id = format!("q{qi:0qw$}");
        let topic = &members[rng.random_range(0..spec.num_topics)];
        let qlen = rng.random_range(spec.query_len_range.0..=spec.query_len_range.1);
        let query: Vec<usize> = (0..qlen).map(|_| topic[rng.random_range(0..topic.len())]).collect();

        let first = records.len();
        for di in 0..spec.docs_per_query {
            let intent: f64 = rng.random();
            let dlen = rng.random_range(spec.doc_len_range.0..=spec.doc_len_range.1);
            let doc: Vec<usize> = (0..dlen)
                .map(|_| {
                    let r: f64 = rng.random();
                    if r < 0.35 * intent {
                        query[rng.random_range(0..query.len())]
                    } else if r < 0.9 * intent {
                        topic[rng.random_range(0..topic.len())]
                    } else {
                        rng.random_range(0..spec.vocab_size)
                    }
                })
                .collect();
            let relevance = planted_relevance(&query, &doc, &vectors);
            let clicks = simulate_clicks(relevance, spec.impressions, spec.relevance_noise, &mut rng);
            let doc_id = format!("{query_id}-d{di:0dw$}");
            truth.push(LabeledPair::new(&query_id, &doc_id, relevance));
            records.push(ClickLogRecord {
                query_id: query_id.clone(),
                query_terms: query.iter().map(|&t| id_of(t)).collect(),
                doc_id,
                doc_terms: doc.iter().map(|&t| id_of(t)).collect(),
                impressions: spec.impressions,
                clicks,
                session_single_click: false,
            });
        }

        // One single-click session per query, on a clicked document drawn in
        // proportion to its clicks.
        let total: u64 = records[first..].iter().map(|r| r.clicks).sum();
        if total > 0 {
            let mut pick = rng.random_range(0..total);
            for r in &mut records[first..] {
                if pick < r.clicks {
                    r.session_single_click = true;
                    break;
                }
                pick -= r.clicks;
            }
        }
    }
    Ok(SyntheticCorpus { records, vocab, truth })
}

fn planted_relevance(query: &[usize], doc: &[usize], vectors: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    for &q in query {
        for &d in doc {
            let c: f64 = vectors[q].iter().zip(&vectors[d]).map(|(a, b)| a * b).sum();
            sum += c.max(0.0);
        }
    }
    let affinity = sum / (query.len() * doc.len()) as f64;
    ((affinity - AFFINITY_FLOOR) / (AFFINITY_CEIL - AFFINITY_FLOOR)).clamp(0.0, 1.0)
}

/// Draws a click count for one pair.
///
/// The click propensity is `relevance` itself when `noise` is zero (or the
/// relevance is 0 or 1); otherwise it is Beta-distributed with mean
/// `relevance` and standard deviation `noise`, capped so the Beta stays proper.
pub fn simulate_clicks<R: Rng + ?Sized>(relevance: f64, impressions: u64, noise: f64, rng: &mut R) -> u64 {
    let relevance = relevance.clamp(0.0, 1.0);
    let spread = relevance * (1.0 - relevance);
    let propensity = if noise == 0.0 || spread == 0.0 {
        relevance
    } else {
        let variance = (noise * noise).min(0.99 * spread);
        let concentration = spread / variance - 1.0;
        Beta::new(relevance * concentration, (1.0 - relevance) * concentration)
            .map(|b| b.sample(rng))
            .unwrap_or(relevance)
    };
    Binomial::new(impressions, propensity)
        .map(|b| b.sample(rng))
        .unwrap_or(0)
}

fn unit_gaussian<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    normalized(v)
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}
