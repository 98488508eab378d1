//! Independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls into the gradient or pooling code it
//! is used to check.
#![allow(dead_code)]

use knrm_core::model::{EmbeddingTable, KernelBank, RankingWeights, TrainedTrial, KERNEL_SUM_FLOOR};
use knrm_core::training::{pairwise_loss, GradientBundle, PreferencePair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Kernel pooling written as a plain triple loop over rows, kernels and
/// columns.
pub fn naive_kernel_pool(m: &[Vec<f64>], mus: &[f64], sigmas: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; mus.len()];
    for k in 0..mus.len() {
        for row in m {
            let mut sum = 0.0;
            for &x in row {
                sum += f64::exp(-((x - mus[k]) * (x - mus[k])) / (2.0 * sigmas[k] * sigmas[k]));
            }
            if sum < KERNEL_SUM_FLOOR {
                sum = KERNEL_SUM_FLOOR;
            }
            out[k] += sum.ln();
        }
    }
    out
}

fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) }
}

fn naive_score(q: &[u32], d: &[u32], t: &TrainedTrial) -> f64 {
    let m: Vec<Vec<f64>> = q
        .iter()
        .map(|&a| d.iter().map(|&b| naive_cos(t.embeddings.row(a), t.embeddings.row(b))).collect())
        .collect();
    let phi = naive_kernel_pool(&m, t.kernels.mus(), t.kernels.sigmas());
    (phi.iter().zip(&t.weights.w).map(|(p, w)| p * w).sum::<f64>() + t.weights.b).tanh()
}

/// Mean hinge loss, via the public per-pair loss.
pub fn batch_loss(batch: &[PreferencePair], t: &TrainedTrial, margin: f64) -> f64 {
    batch.iter().map(|p| pairwise_loss(p, t, margin).unwrap()).sum::<f64>() / batch.len() as f64
}

/// True when a central difference of width `h` could straddle the hinge
/// kink or the kernel-sum floor.
pub fn near_boundary(batch: &[PreferencePair], t: &TrainedTrial, margin: f64) -> bool {
    for p in batch {
        let l = margin - naive_score(&p.query, &p.doc_pos, t) + naive_score(&p.query, &p.doc_neg, t);
        if l.abs() < 1e-6 {
            return true;
        }
        for doc in [&p.doc_pos, &p.doc_neg] {
            for &a in &p.query {
                for k in 0..t.kernels.len() {
                    let (mu, s) = (t.kernels.mus()[k], t.kernels.sigmas()[k]);
                    let sum: f64 = doc
                        .iter()
                        .map(|&b| {
                            let c = naive_cos(t.embeddings.row(a), t.embeddings.row(b));
                            (-(c - mu).powi(2) / (2.0 * s * s)).exp()
                        })
                        .sum();
                    if sum > 0.0 && (sum / KERNEL_SUM_FLOOR).ln().abs() < 1e-2 {
                        return true;
                    }
                }
            }
        }
    }
    false
}

/// Relative error with a 1e-6 floor on the denominator so components that
/// are zero analytically are judged on absolute error.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between `analytic` and central differences of
/// [`batch_loss`] over every trainable parameter the batch touches.
pub fn max_fd_error(batch: &[PreferencePair], trial: &TrainedTrial, margin: f64, analytic: &GradientBundle, h: f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut t = trial.clone();
    let central = |t: &mut TrainedTrial, get: &dyn Fn(&mut TrainedTrial) -> &mut f64| {
        let orig = *get(t);
        *get(t) = orig + h;
        let up = batch_loss(batch, t, margin);
        *get(t) = orig - h;
        let down = batch_loss(batch, t, margin);
        *get(t) = orig;
        (up - down) / (2.0 * h)
    };
    for k in 0..t.weights.w.len() {
        let fd = central(&mut t, &|t| &mut t.weights.w[k]);
        worst = worst.max(rel_err(analytic.d_w[k], fd));
    }
    let fd = central(&mut t, &|t| &mut t.weights.b);
    worst = worst.max(rel_err(analytic.d_b, fd));

    let mut ids: Vec<u32> = batch
        .iter()
        .flat_map(|p| p.query.iter().chain(&p.doc_pos).chain(&p.doc_neg).copied())
        .filter(|&id| id != 0)
        .collect();
    ids.sort_unstable();
    ids.dedup();
    for id in ids {
        for c in 0..t.embeddings.dim() {
            let fd = central(&mut t, &|t| &mut t.embeddings.row_mut(id)[c]);
            let a = analytic.d_embeddings.get(&id).map_or(0.0, |r| r[c]);
            worst = worst.max(rel_err(a, fd));
        }
    }
    worst
}

/// A small random model and batch: V ≤ 8, d ≤ 4, K ≤ 3, sequences ≤ 3.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (TrainedTrial, Vec<PreferencePair>) {
    let vocab = rng.random_range(3..=8usize);
    let dim = rng.random_range(1..=4usize);
    let k = rng.random_range(1..=3usize);
    let mus = (0..k).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let sigmas = (0..k).map(|_| rng.random_range(0.05..=0.5)).collect();
    let mut rows = vec![vec![0.0; dim]];
    for _ in 1..vocab {
        rows.push((0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect());
    }
    let trial = TrainedTrial {
        embeddings: EmbeddingTable::from_rows(&rows).unwrap(),
        weights: RankingWeights {
            w: (0..k).map(|_| rng.random_range(-1.5..=1.5)).collect(),
            b: rng.random_range(-0.5..=0.5),
        },
        kernels: KernelBank::new(mus, sigmas).unwrap(),
        seed: 0,
        epochs_trained: 0,
        validation_history: vec![],
    };
    let seq = |rng: &mut ChaCha8Rng| -> Vec<u32> {
        let len = rng.random_range(1..=3usize);
        (0..len).map(|_| rng.random_range(1..vocab as u32)).collect()
    };
    let pairs = (0..rng.random_range(1..=3))
        .map(|_| PreferencePair { query: seq(rng), doc_pos: seq(rng), doc_neg: seq(rng) })
        .collect();
    (trial, pairs)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
