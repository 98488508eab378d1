//! The K-NRM scoring function.
//!
//! A query and a document are compared through the cosine similarity of
//! every query/document token embedding (the translation matrix). Each row
//! of that matrix is pooled by a bank of Gaussian kernels; the log kernel
//! sums, added up over query tokens, form the soft-TF feature vector. A
//! linear layer followed by `tanh` turns the features into a score.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::{Candidate, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::eval::RankedList;

/// Floor applied to every kernel sum before taking its log.
pub const KERNEL_SUM_FLOOR: f64 = 1e-10;

/// Row-major `vocab_size × dim` matrix of word vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(vocab_size: usize, dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; vocab_size * dim],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Config("embedding rows must share a positive dimension".into()));
        }
        Ok(Self {
            dim,
            data: rows.concat(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.data.len() / self.dim.max(1)
    }

    pub fn row(&self, id: u32) -> &[f64] {
        let start = id as usize * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn row_mut(&mut self, id: u32) -> &mut [f64] {
        let start = id as usize * self.dim;
        &mut self.data[start..start + self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn check(&self, ids: &[u32]) -> Result<()> {
        let vocab_size = self.vocab_size();
        match ids.iter().find(|&&id| id as usize >= vocab_size) {
            Some(&id) => Err(Error::TokenOutOfRange { id, vocab_size }),
            None => Ok(()),
        }
    }

    /// Overwrites rows with vectors from a word2vec-style text file
    /// (`token v1 v2 ... vd` per line; an optional `count dim` header line is
    /// skipped). Tokens outside `vocab` are ignored. Returns the number of
    /// rows replaced.
    pub fn load_word_vectors<R: Read>(&mut self, input: R, vocab: &Vocabulary) -> Result<usize> {
        let mut loaded = 0;
        for (n, line) in BufReader::new(input).lines().enumerate() {
            let line = line?;
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let values: Vec<&str> = fields.collect();
            if n == 0 && values.len() == 1 && token.parse::<usize>().is_ok() {
                continue;
            }
            let Some(id) = vocab.id(token) else { continue };
            if values.len() != self.dim {
                return Err(Error::parse(
                    n + 1,
                    format!("expected {} components, found {}", self.dim, values.len()),
                ));
            }
            let row = self.row_mut(id);
            for (slot, v) in row.iter_mut().zip(values) {
                *slot = v
                    .parse()
                    .map_err(|_| Error::parse(n + 1, format!("bad vector component {v:?}")))?;
            }
            loaded += 1;
        }
        Ok(loaded)
    }
}

/// The Gaussian kernels (μ_k, σ_k) used for soft-match pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    mus: Vec<f64>,
    sigmas: Vec<f64>,
}

impl KernelBank {
    pub fn new(mus: Vec<f64>, sigmas: Vec<f64>) -> Result<Self> {
        if mus.is_empty() || mus.len() != sigmas.len() {
            return Err(Error::Config("kernel bank needs matching, nonempty mu and sigma lists".into()));
        }
        if sigmas.iter().any(|&s| !(s > 0.0 && s.is_finite())) || mus.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("kernel sigmas must be positive and all parameters finite".into()));
        }
        Ok(Self { mus, sigmas })
    }

    /// An exact-match kernel at μ = 1 followed by `soft` kernels whose means
    /// split [−1, 1] into equal bins, centred in each bin.
    pub fn with_soft_kernels(soft: usize, exact_sigma: f64, soft_sigma: f64) -> Result<Self> {
        let width = 2.0 / soft as f64;
        let mut mus = vec![1.0];
        let mut sigmas = vec![exact_sigma];
        for i in 0..soft {
            // Rounded so the default bank reads 0.9, 0.7, ... exactly.
            let mu = 1.0 - width / 2.0 - width * i as f64;
            mus.push((mu * 1e12).round() / 1e12);
            sigmas.push(soft_sigma);
        }
        Self::new(mus, sigmas)
    }

    pub fn len(&self) -> usize {
        self.mus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mus.is_empty()
    }

    pub fn mus(&self) -> &[f64] {
        &self.mus
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Index of the kernel whose μ is closest to `cosine`; ties go to the
    /// larger μ.
    pub fn nearest(&self, cosine: f64) -> usize {
        let mut best = 0;
        for k in 1..self.mus.len() {
            let d = (cosine - self.mus[k]).abs();
            let b = (cosine - self.mus[best]).abs();
            if d < b || (d == b && self.mus[k] > self.mus[best]) {
                best = k;
            }
        }
        best
    }
}

impl Default for KernelBank {
    /// Eleven kernels: exact match (μ = 1, σ = 1e-3) and ten soft kernels at
    /// μ = 0.9, 0.7, ..., −0.9 with σ = 0.1.
    fn default() -> Self {
        Self::with_soft_kernels(10, 1e-3, 0.1).expect("default kernel bank is valid")
    }
}

/// Cosine similarities between query tokens (rows) and document tokens
/// (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct TranslationMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TranslationMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged translation matrix");
        Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Log kernel sums, one entry per kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTf(pub Vec<f64>);

/// The linear learning-to-rank layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingWeights {
    pub w: Vec<f64>,
    pub b: f64,
}

/// One trained (or freshly initialised) model together with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedTrial {
    pub embeddings: EmbeddingTable,
    pub weights: RankingWeights,
    pub kernels: KernelBank,
    pub seed: u64,
    pub epochs_trained: usize,
    /// Validation NDCG@10 after each epoch that was run.
    pub validation_history: Vec<f64>,
}

/// Anything that assigns a relevance score to a (query, document) pair.
pub trait Scorer: Sync {
    fn score(&self, query: &[u32], doc: &[u32]) -> Result<f64>;
}

impl Scorer for TrainedTrial {
    fn score(&self, query: &[u32], doc: &[u32]) -> Result<f64> {
        score(query, doc, self)
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn score(&self, query: &[u32], doc: &[u32]) -> Result<f64> {
        (**self).score(query, doc)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Builds the query × document cosine matrix. Zero-norm rows (such as PAD)
/// yield cosine 0.
pub fn translation_matrix(query: &[u32], doc: &[u32], emb: &EmbeddingTable) -> Result<TranslationMatrix> {
    emb.check(query)?;
    emb.check(doc)?;
    let mut data = Vec::with_capacity(query.len() * doc.len());
    for &q in query {
        let qv = emb.row(q);
        for &d in doc {
            data.push(cosine(qv, emb.row(d)));
        }
    }
    Ok(TranslationMatrix {
        rows: query.len(),
        cols: doc.len(),
        data,
    })
}

#[inline]
pub(crate) fn gaussian(x: f64, mu: f64, sigma: f64) -> f64 {
    let d = x - mu;
    (-d * d / (2.0 * sigma * sigma)).exp()
}

/// Soft-TF features: for each kernel, the sum over query rows of the log of
/// that row's kernel sum (floored at [`KERNEL_SUM_FLOOR`]).
pub fn kernel_pool(m: &TranslationMatrix, kernels: &KernelBank) -> SoftTf {
    let mut phi = vec![0.0; kernels.len()];
    for i in 0..m.rows() {
        let row = m.row(i);
        for (k, (&mu, &sigma)) in kernels.mus.iter().zip(&kernels.sigmas).enumerate() {
            let sum: f64 = row.iter().map(|&x| gaussian(x, mu, sigma)).sum();
            phi[k] += sum.max(KERNEL_SUM_FLOOR).ln();
        }
    }
    SoftTf(phi)
}

/// `tanh(w · φ + b)`.
pub fn score_features(phi: &SoftTf, weights: &RankingWeights) -> f64 {
    let z: f64 = phi.0.iter().zip(&weights.w).map(|(p, w)| p * w).sum::<f64>() + weights.b;
    z.tanh()
}

pub fn score(query: &[u32], doc: &[u32], trial: &TrainedTrial) -> Result<f64> {
    let m = translation_matrix(query, doc, &trial.embeddings)?;
    Ok(score_features(&kernel_pool(&m, &trial.kernels), &trial.weights))
}

/// Scores and sorts candidates, best first; equal scores are ordered by
/// ascending document id.
pub fn rank<S: Scorer + ?Sized>(
    query_id: &str,
    query: &[u32],
    candidates: &[Candidate],
    scorer: &S,
) -> Result<RankedList> {
    let scored = candidates
        .iter()
        .map(|c| Ok((c.doc_id.clone(), scorer.score(query, &c.terms)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RankedList::from_scores(query_id, scored))
}

const ARTIFACT_MAGIC: &str = "knrm-trial";
const ARTIFACT_VERSION: u32 = 1;

impl TrainedTrial {
    pub fn vocab_size(&self) -> usize {
        self.embeddings.vocab_size()
    }

    /// Writes the line-structured artifact. Floats use Rust's shortest
    /// round-trip formatting, so reading back is exact.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        writeln!(out, "{ARTIFACT_MAGIC} v{ARTIFACT_VERSION}")?;
        writeln!(out, "dim {}", self.embeddings.dim())?;
        writeln!(out, "vocab {}", self.vocab_size())?;
        writeln!(out, "seed {}", self.seed)?;
        writeln!(out, "epochs {}", self.epochs_trained)?;
        writeln!(out, "kernels {}", self.kernels.len())?;
        writeln!(out, "mu {}", list(self.kernels.mus()))?;
        writeln!(out, "sigma {}", list(self.kernels.sigmas()))?;
        writeln!(out, "w {}", list(&self.weights.w))?;
        writeln!(out, "b {:?}", self.weights.b)?;
        writeln!(out, "history {} {}", self.validation_history.len(), list(&self.validation_history))?;
        writeln!(out, "embeddings")?;
        for row in self.embeddings.as_slice().chunks(self.embeddings.dim()) {
            writeln!(out, "{}", list(row))?;
        }
        Ok(())
    }

    /// Reads an artifact. When `expected_vocab` is given, a trial built for a
    /// different vocabulary size is rejected.
    pub fn read_from<R: Read>(input: R, expected_vocab: Option<usize>) -> Result<Self> {
        let mut lines = BufReader::new(input).lines().enumerate();
        let mut next = |key: &str| -> Result<(usize, String)> {
            let (n, line) = lines
                .next()
                .ok_or_else(|| Error::Artifact(format!("truncated before {key:?}")))?;
            let line = line?;
            let rest = if key.is_empty() {
                line
            } else {
                line.strip_prefix(key)
                    .and_then(|r| r.strip_prefix(' ').or(if r.is_empty() { Some("") } else { None }))
                    .ok_or_else(|| Error::Artifact(format!("line {}: expected {key:?}", n + 1)))?
                    .to_owned()
            };
            Ok((n + 1, rest))
        };
        let floats = |(n, s): (usize, String)| -> Result<Vec<f64>> {
            s.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| Error::Artifact(format!("line {n}: bad number {t:?}"))))
                .collect()
        };
        let int = |(n, s): (usize, String)| -> Result<u64> {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::Artifact(format!("line {n}: bad integer {s:?}")))
        };

        let header = next(ARTIFACT_MAGIC)?.1;
        if header != format!("v{ARTIFACT_VERSION}") {
            return Err(Error::Artifact(format!("unsupported version {header:?}")));
        }
        let dim = int(next("dim")?)? as usize;
        let vocab = int(next("vocab")?)? as usize;
        if let Some(expected) = expected_vocab {
            if expected != vocab {
                return Err(Error::VocabMismatch { expected, found: vocab });
            }
        }
        let seed = int(next("seed")?)?;
        let epochs_trained = int(next("epochs")?)? as usize;
        let k = int(next("kernels")?)? as usize;
        let mus = floats(next("mu")?)?;
        let sigmas = floats(next("sigma")?)?;
        let w = floats(next("w")?)?;
        let b = floats(next("b")?)?;
        let mut history = floats(next("history")?)?;
        if mus.len() != k || w.len() != k || b.len() != 1 || history.is_empty() {
            return Err(Error::Artifact("kernel, weight or history lengths disagree".into()));
        }
        let h = history.remove(0) as usize;
        if h != history.len() {
            return Err(Error::Artifact("history length disagrees".into()));
        }
        let kernels = KernelBank::new(mus, sigmas).map_err(|e| Error::Artifact(e.to_string()))?;
        next("embeddings")?;
        let mut data = Vec::with_capacity(vocab * dim);
        for _ in 0..vocab {
            let row = floats(next("")?)?;
            if row.len() != dim {
                return Err(Error::Artifact(format!("embedding row has {} values, expected {dim}", row.len())));
            }
            data.extend(row);
        }
        if data.iter().chain(&w).chain(&b).any(|x| !x.is_finite()) {
            return Err(Error::Artifact("non-finite parameter".into()));
        }
        Ok(TrainedTrial {
            embeddings: EmbeddingTable { dim, data },
            weights: RankingWeights { w, b: b[0] },
            kernels,
            seed,
            epochs_trained,
            validation_history: history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write_to(&mut out)?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, expected_vocab: Option<usize>) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(file, expected_vocab)
    }

    /// True when the PAD row is exactly zero.
    pub fn pad_is_zero(&self) -> bool {
        self.embeddings.row(PAD).iter().all(|&x| x == 0.0)
    }
}
