//! End-to-end training of one trial and of multi-trial farms.
//!
//! The objective is the mean pairwise hinge loss over within-query preference
//! pairs. Gradients are derived by hand through `tanh`, the linear layer, the
//! floored log, the Gaussian kernels and the cosine similarities, and applied
//! with bias-corrected Adam.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{LabelSet, QueryGroup, PAD};
use crate::error::{Error, Result};
use crate::eval::{ndcg_at_k, rank_all};
use crate::model::{
    gaussian, translation_matrix, EmbeddingTable, KernelBank, RankingWeights, TrainedTrial,
    KERNEL_SUM_FLOOR,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_eps: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub early_stop_patience: usize,
    pub hinge_margin: f64,
    pub seed: u64,
    /// Half-width of the uniform initialisation interval.
    pub init_scale: f64,
    pub embedding_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            adam_eps: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            batch_size: 16,
            max_epochs: 20,
            early_stop_patience: 2,
            hinge_margin: 1.0,
            seed: 0,
            init_scale: 0.1,
            embedding_dim: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_owned()));
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps must be positive");
        }
        if self.early_stop_patience == 0 {
            return fail("early_stop_patience must be at least 1");
        }
        if !(self.init_scale >= 0.0) || !self.hinge_margin.is_finite() {
            return fail("init_scale must be non-negative and hinge_margin finite");
        }
        if self.embedding_dim == 0 {
            return fail("embedding_dim must be at least 1");
        }
        Ok(())
    }
}

/// A query with a preferred and a less-preferred document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferencePair {
    pub query: Vec<u32>,
    pub doc_pos: Vec<u32>,
    pub doc_neg: Vec<u32>,
}

/// Gradient of the mean batch loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub d_w: Vec<f64>,
    pub d_b: f64,
    /// Rows for every non-PAD token of the pairs with positive loss.
    pub d_embeddings: BTreeMap<u32, Vec<f64>>,
}

impl GradientBundle {
    fn zeros(kernels: usize) -> Self {
        Self {
            d_w: vec![0.0; kernels],
            d_b: 0.0,
            d_embeddings: BTreeMap::new(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.d_b == 0.0
            && self.d_w.iter().all(|&g| g == 0.0)
            && self.d_embeddings.values().flatten().all(|&g| g == 0.0)
    }
}

/// A fresh trial: uniform `[-init_scale, init_scale]` embeddings and weights
/// drawn from a stream seeded by `seed`, zero PAD row, zero bias.
pub fn init_trial(vocab_size: usize, dim: usize, kernels: &KernelBank, seed: u64, init_scale: f64) -> TrainedTrial {
    assert!(vocab_size >= 2 && dim >= 1, "need PAD, UNK and a positive dimension");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || {
        if init_scale == 0.0 {
            0.0
        } else {
            rng.random_range(-init_scale..=init_scale)
        }
    };
    let mut embeddings = EmbeddingTable::zeros(vocab_size, dim);
    embeddings.as_mut_slice().iter_mut().for_each(|x| *x = draw());
    embeddings.row_mut(PAD).fill(0.0);
    let w = (0..kernels.len()).map(|_| draw()).collect();
    TrainedTrial {
        embeddings,
        weights: RankingWeights { w, b: 0.0 },
        kernels: kernels.clone(),
        seed,
        epochs_trained: 0,
        validation_history: Vec::new(),
    }
}

/// Intermediate values of one forward pass, kept for the backward pass.
struct Tape {
    q_norms: Vec<f64>,
    d_norms: Vec<f64>,
    cos: Vec<f64>,
    sums: Vec<f64>,
    phi: Vec<f64>,
    score: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn forward(query: &[u32], doc: &[u32], trial: &TrainedTrial) -> Result<Tape> {
    let emb = &trial.embeddings;
    let m = translation_matrix(query, doc, emb)?;
    let kernels = &trial.kernels;
    let nk = kernels.len();
    let mut sums = vec![0.0; query.len() * nk];
    let mut phi = vec![0.0; nk];
    for i in 0..query.len() {
        let row = m.row(i);
        for k in 0..nk {
            let (mu, sigma) = (kernels.mus()[k], kernels.sigmas()[k]);
            let s: f64 = row.iter().map(|&x| gaussian(x, mu, sigma)).sum();
            sums[i * nk + k] = s;
            phi[k] += s.max(KERNEL_SUM_FLOOR).ln();
        }
    }
    let z: f64 = phi.iter().zip(&trial.weights.w).map(|(p, w)| p * w).sum::<f64>() + trial.weights.b;
    let cos = (0..m.rows()).flat_map(|i| m.row(i).to_vec()).collect();
    Ok(Tape {
        q_norms: query.iter().map(|&t| norm(emb.row(t))).collect(),
        d_norms: doc.iter().map(|&t| norm(emb.row(t))).collect(),
        cos,
        sums,
        phi,
        score: z.tanh(),
    })
}

fn add_row(acc: &mut BTreeMap<u32, Vec<f64>>, id: u32, scale: f64, a: &[f64], b_scale: f64, b: &[f64]) {
    if id == PAD {
        return;
    }
    let row = acc.entry(id).or_insert_with(|| vec![0.0; a.len()]);
    for ((r, x), y) in row.iter_mut().zip(a).zip(b) {
        *r += scale * x + b_scale * y;
    }
}

/// Accumulates `upstream * d score / d params` into `grad`.
fn backward(query: &[u32], doc: &[u32], trial: &TrainedTrial, tape: &Tape, upstream: f64, grad: &mut GradientBundle) {
    let dz = upstream * (1.0 - tape.score * tape.score);
    for (g, p) in grad.d_w.iter_mut().zip(&tape.phi) {
        *g += dz * p;
    }
    grad.d_b += dz;

    let kernels = &trial.kernels;
    let nk = kernels.len();
    let n_doc = doc.len();
    let emb = &trial.embeddings;
    let mut d_sum = vec![0.0; nk];
    for (i, &qt) in query.iter().enumerate() {
        for k in 0..nk {
            let s = tape.sums[i * nk + k];
            // The floored branch is constant, so it passes no gradient.
            d_sum[k] = if s > KERNEL_SUM_FLOOR {
                dz * trial.weights.w[k] / s
            } else {
                0.0
            };
        }
        let qn = tape.q_norms[i];
        for (j, &dt) in doc.iter().enumerate() {
            let dn = tape.d_norms[j];
            if qn == 0.0 || dn == 0.0 {
                continue;
            }
            let c = tape.cos[i * n_doc + j];
            let mut d_cos = 0.0;
            for k in 0..nk {
                if d_sum[k] != 0.0 {
                    let (mu, sigma) = (kernels.mus()[k], kernels.sigmas()[k]);
                    d_cos += d_sum[k] * gaussian(c, mu, sigma) * (mu - c) / (sigma * sigma);
                }
            }
            if d_cos == 0.0 {
                continue;
            }
            // d cos(q, d) / dq = d / (|q||d|) - cos * q / |q|^2, symmetric in d.
            let (qv, dv) = (emb.row(qt), emb.row(dt));
            let cross = d_cos / (qn * dn);
            add_row(&mut grad.d_embeddings, qt, cross, dv, -d_cos * c / (qn * qn), qv);
            add_row(&mut grad.d_embeddings, dt, cross, qv, -d_cos * c / (dn * dn), dv);
        }
    }
}

pub fn pairwise_loss(pair: &PreferencePair, trial: &TrainedTrial, margin: f64) -> Result<f64> {
    let pos = crate::model::score(&pair.query, &pair.doc_pos, trial)?;
    let neg = crate::model::score(&pair.query, &pair.doc_neg, trial)?;
    Ok((margin - pos + neg).max(0.0))
}

/// Mean hinge loss of `batch` and its gradient.
pub fn loss_and_gradients(batch: &[PreferencePair], trial: &TrainedTrial, margin: f64) -> Result<(f64, GradientBundle)> {
    assert!(!batch.is_empty(), "empty batch");
    let dim = trial.embeddings.dim();
    let scale = 1.0 / batch.len() as f64;
    let mut grad = GradientBundle::zeros(trial.kernels.len());
    let mut loss = 0.0;
    for pair in batch {
        let pos = forward(&pair.query, &pair.doc_pos, trial)?;
        let neg = forward(&pair.query, &pair.doc_neg, trial)?;
        let l = margin - pos.score + neg.score;
        if l <= 0.0 {
            continue;
        }
        loss += l * scale;
        for &t in pair.query.iter().chain(&pair.doc_pos).chain(&pair.doc_neg) {
            if t != PAD {
                grad.d_embeddings.entry(t).or_insert_with(|| vec![0.0; dim]);
            }
        }
        backward(&pair.query, &pair.doc_pos, trial, &pos, -scale, &mut grad);
        backward(&pair.query, &pair.doc_neg, trial, &neg, scale, &mut grad);
    }
    Ok((loss, grad))
}

/// Gradient of the mean pairwise hinge loss over `batch` with respect to the
/// ranking weights, the bias and every embedding row involved.
pub fn gradients(batch: &[PreferencePair], trial: &TrainedTrial, margin: f64) -> Result<GradientBundle> {
    loss_and_gradients(batch, trial, margin).map(|(_, g)| g)
}

/// Bias-corrected Adam over all trainable parameters. The PAD row is frozen.
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(config: &TrainConfig, params: usize) -> Self {
        Self {
            lr: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            t: 0,
            m: vec![0.0; params],
            v: vec![0.0; params],
        }
    }

    fn step(&mut self, trial: &mut TrainedTrial, grad: &GradientBundle) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let update = |slot: usize, p: &mut f64, g: f64, m: &mut [f64], v: &mut [f64]| {
            m[slot] = b1 * m[slot] + (1.0 - b1) * g;
            v[slot] = b2 * v[slot] + (1.0 - b2) * g * g;
            *p -= lr * (m[slot] / c1) / ((v[slot] / c2).sqrt() + eps);
        };
        let (m, v) = (&mut self.m, &mut self.v);
        let nk = trial.weights.w.len();
        for k in 0..nk {
            update(k, &mut trial.weights.w[k], grad.d_w[k], m, v);
        }
        update(nk, &mut trial.weights.b, grad.d_b, m, v);

        let dim = trial.embeddings.dim();
        let offset = nk + 1;
        let zeros = vec![0.0; dim];
        let mut rows = grad.d_embeddings.iter().peekable();
        for (id, row) in trial.embeddings.as_mut_slice().chunks_mut(dim).enumerate().skip(1) {
            let g = match rows.peek() {
                Some((&r, _)) if r as usize == id => rows.next().map(|(_, g)| g.as_slice()).unwrap_or(&zeros),
                _ => &zeros,
            };
            for (c, (p, &gc)) in row.iter_mut().zip(g).enumerate() {
                update(offset + id * dim + c, p, gc, m, v);
            }
        }
    }
}

/// Queries plus the labels used to derive preferences or measure NDCG.
#[derive(Debug, Clone, Copy)]
pub struct LabeledQueries<'a> {
    pub queries: &'a [QueryGroup],
    pub labels: &'a LabelSet,
}

/// Every strictly ordered (higher label, lower label) document pair within
/// each query. Unlabelled documents count as 0; ties are skipped.
pub fn preference_pairs(data: LabeledQueries<'_>) -> Vec<PreferencePair> {
    let mut pairs = Vec::new();
    for q in data.queries {
        let label = |d: &str| data.labels.get(&q.query_id, d).unwrap_or(0.0);
        for a in &q.candidates {
            let la = label(&a.doc_id);
            for b in &q.candidates {
                if la > label(&b.doc_id) {
                    pairs.push(PreferencePair {
                        query: q.query_terms.clone(),
                        doc_pos: a.terms.clone(),
                        doc_neg: b.terms.clone(),
                    });
                }
            }
        }
    }
    pairs
}

/// Mean NDCG@10 over `data.queries`.
pub fn mean_ndcg10(trial: &TrainedTrial, data: LabeledQueries<'_>) -> Result<f64> {
    let rankings = rank_all(trial, data.queries)?;
    if rankings.is_empty() {
        return Ok(0.0);
    }
    Ok(rankings.iter().map(|r| ndcg_at_k(r, data.labels, 10)).sum::<f64>() / rankings.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ndcg10: f64,
}

/// A finished training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    /// Snapshot from the best validation epoch; its `validation_history`
    /// covers every epoch that ran.
    pub trial: TrainedTrial,
    /// Mean training loss before the first update.
    pub initial_loss: f64,
    pub epochs: Vec<EpochMetrics>,
}

impl TrainRun {
    /// `epoch,train_loss,val_ndcg10` lines with a header.
    pub fn write_epoch_log<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epoch,train_loss,val_ndcg10")?;
        writeln!(out, "0,{:?},", self.initial_loss)?;
        for e in &self.epochs {
            writeln!(out, "{},{:?},{:?}", e.epoch, e.train_loss, e.val_ndcg10)?;
        }
        Ok(())
    }
}

/// Trains one trial.
///
/// Preference pairs are shuffled once with a stream derived from
/// `config.seed` and chunked into fixed batches. After every epoch the
/// validation NDCG@10 is recorded; training stops after
/// `early_stop_patience` epochs without improvement or at `max_epochs`.
pub fn train(
    data: LabeledQueries<'_>,
    validation: LabeledQueries<'_>,
    vocab_size: usize,
    kernels: &KernelBank,
    config: &TrainConfig,
) -> Result<TrainRun> {
    config.validate()?;
    let trial = init_trial(vocab_size, config.embedding_dim, kernels, config.seed, config.init_scale);
    train_from(data, validation, trial, config)
}

/// Like [`train`], but starts from `initial` (e.g. a trial whose embedding
/// rows were overwritten with pretrained vectors). `config.seed` still drives
/// the pair order.
pub fn train_from(
    data: LabeledQueries<'_>,
    validation: LabeledQueries<'_>,
    initial: TrainedTrial,
    config: &TrainConfig,
) -> Result<TrainRun> {
    config.validate()?;
    if !initial.pad_is_zero() {
        return Err(Error::Config("the PAD embedding row must be zero".into()));
    }
    let kernels = initial.kernels.clone();
    let mut trial = initial;
    let mut pairs = preference_pairs(data);
    if pairs.is_empty() {
        return Err(Error::Config(
            "no preference pairs: every training query has a single distinct label".into(),
        ));
    }
    if validation.queries.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(1);
    pairs.shuffle(&mut order_rng);

    let initial_loss = mean_loss(&pairs, &trial, config)?;
    if config.max_epochs == 0 {
        return Ok(TrainRun {
            trial,
            initial_loss,
            epochs: Vec::new(),
        });
    }

    let params = kernels.len() + 1 + trial.embeddings.as_slice().len();
    let mut adam = Adam::new(config, params);
    let mut epochs = Vec::new();
    let mut best: Option<(f64, TrainedTrial)> = None;
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        let mut loss_sum = 0.0;
        for batch in pairs.chunks(config.batch_size) {
            let (loss, grad) = loss_and_gradients(batch, &trial, config.hinge_margin)?;
            adam.step(&mut trial, &grad);
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / pairs.len() as f64;
        let val_ndcg10 = mean_ndcg10(&trial, validation)?;
        trial.epochs_trained = epoch;
        trial.validation_history.push(val_ndcg10);
        epochs.push(EpochMetrics {
            epoch,
            train_loss,
            val_ndcg10,
        });
        log::debug!("seed {} epoch {epoch}: loss {train_loss:.5} val ndcg@10 {val_ndcg10:.4}", config.seed);

        if best.as_ref().is_none_or(|(b, _)| val_ndcg10 > *b) {
            best = Some((val_ndcg10, trial.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.early_stop_patience {
                break;
            }
        }
    }
    let mut out = best.map(|(_, t)| t).expect("at least one epoch ran");
    out.validation_history = trial.validation_history;
    Ok(TrainRun {
        trial: out,
        initial_loss,
        epochs,
    })
}

fn mean_loss(pairs: &[PreferencePair], trial: &TrainedTrial, config: &TrainConfig) -> Result<f64> {
    let mut sum = 0.0;
    for p in pairs {
        sum += pairwise_loss(p, trial, config.hinge_margin)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Consecutive seeds starting at `base`.
pub fn trial_seeds(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base.wrapping_add(i)).collect()
}

/// Trains one trial per seed, in parallel on the current rayon pool.
///
/// Trials differ only in seed and share nothing mutable, so the output is
/// independent of scheduling. Results keep seed order; a failing trial does
/// not stop its siblings.
pub fn run_trials(
    data: LabeledQueries<'_>,
    validation: LabeledQueries<'_>,
    vocab_size: usize,
    kernels: &KernelBank,
    config: &TrainConfig,
    seeds: &[u64],
) -> Vec<Result<TrainRun>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let config = TrainConfig { seed, ..config.clone() };
            train(data, validation, vocab_size, kernels, &config)
        })
        .collect()
}
