//! Concept activation vectors: the unit normal of a linear boundary between a
//! concept's activations and activations of random negatives.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cav {
    pub class: usize,
    pub concept: usize,
    pub layer: String,
    /// Unit vector pointing toward the positive (concept) side.
    pub vector: Vec<f32>,
    pub heldout_accuracy: f64,
    pub train_accuracy: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl Cav {
    pub fn from_fit(class: usize, concept: usize, layer: &str, fit: CavFit) -> Self {
        Self {
            class,
            concept,
            layer: layer.to_string(),
            vector: fit.direction,
            heldout_accuracy: fit.heldout_accuracy,
            train_accuracy: fit.train_accuracy,
            n_pos: fit.n_pos,
            n_neg: fit.n_neg,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CavParams {
    pub l2: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CavParams {
    fn default() -> Self {
        Self { l2: 1e-3, epochs: 500, lr: 0.1, seed: 0 }
    }
}

/// Fitted logistic boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct CavFit {
    pub direction: Vec<f32>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub heldout_accuracy: f64,
    pub train_accuracy: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

pub const HELDOUT_FRACTION: f64 = 0.2;
const MIN_PER_SIDE: usize = 4;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Seeded split of `0..n` into (train, heldout). The permutation depends only
/// on `n` and `seed`, so both sides of an equal-size problem split alike.
fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64 * HELDOUT_FRACTION).round() as usize).clamp(1, n - 1);
    let test = idx[..n_test].to_vec();
    let train = idx[n_test..].to_vec();
    (train, test)
}

fn pick<'a>(rows: &'a [Vec<f32>], idx: &[usize]) -> Vec<&'a Vec<f32>> {
    idx.iter().map(|i| &rows[*i]).collect()
}

fn accuracy(weights: &[f64], bias: f64, pos: &[&Vec<f32>], neg: &[&Vec<f32>]) -> f64 {
    let score = |x: &Vec<f32>| weights.iter().zip(x).map(|(w, v)| w * *v as f64).sum::<f64>() + bias;
    let correct = pos.iter().filter(|x| score(x) > 0.0).count() + neg.iter().filter(|x| score(x) <= 0.0).count();
    correct as f64 / (pos.len() + neg.len()) as f64
}

/// L2-regularized logistic regression by full-batch gradient descent.
///
/// A stratified 80/20 split holds out samples for `heldout_accuracy`. The
/// returned direction is `w / ‖w‖`.
pub fn train_cav(positives: &[Vec<f32>], negatives: &[Vec<f32>], params: &CavParams) -> Result<CavFit> {
    if positives.len() < MIN_PER_SIDE || negatives.len() < MIN_PER_SIDE {
        return Err(Error::invalid(format!(
            "need at least {MIN_PER_SIDE} positives and negatives, got {} and {}",
            positives.len(),
            negatives.len()
        )));
    }
    let dim = positives[0].len();
    if positives.iter().chain(negatives).any(|r| r.len() != dim) || dim == 0 {
        return Err(Error::invalid("feature rows have inconsistent widths"));
    }
    let (pos_train, pos_test) = split_indices(positives.len(), params.seed);
    let (neg_train, neg_test) = split_indices(negatives.len(), params.seed);
    let (ptr, nt) = (pick(positives, &pos_train), pick(negatives, &neg_train));
    let n = (ptr.len() + nt.len()) as f64;

    let mut w = vec![0.0f64; dim];
    let mut b = 0.0f64;
    let mut gp = vec![0.0f64; dim];
    let mut gn = vec![0.0f64; dim];
    for _ in 0..params.epochs {
        // Positive and negative sums are accumulated separately so that
        // identical sides cancel exactly.
        gp.iter_mut().for_each(|g| *g = 0.0);
        gn.iter_mut().for_each(|g| *g = 0.0);
        let (mut bp, mut bn) = (0.0, 0.0);
        for x in &ptr {
            let z = w.iter().zip(x.iter()).map(|(w, v)| w * *v as f64).sum::<f64>() + b;
            let r = sigmoid(z) - 1.0;
            bp += r;
            gp.iter_mut().zip(x.iter()).for_each(|(g, v)| *g += r * *v as f64);
        }
        for x in &nt {
            let z = w.iter().zip(x.iter()).map(|(w, v)| w * *v as f64).sum::<f64>() + b;
            let r = sigmoid(z);
            bn += r;
            gn.iter_mut().zip(x.iter()).for_each(|(g, v)| *g += r * *v as f64);
        }
        for ((wi, p), q) in w.iter_mut().zip(&gp).zip(&gn) {
            *wi -= params.lr * ((p + q) / n + params.l2 * *wi);
        }
        b -= params.lr * (bp + bn) / n;
    }
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm.is_nan() || norm < 1e-12 {
        return Err(Error::DegenerateCav { norm });
    }
    let direction = w.iter().map(|v| (v / norm) as f32).collect();
    let heldout_accuracy = accuracy(&w, b, &pick(positives, &pos_test), &pick(negatives, &neg_test));
    let train_accuracy = accuracy(&w, b, &ptr, &nt);
    Ok(CavFit {
        direction,
        weights: w,
        bias: b,
        heldout_accuracy,
        train_accuracy,
        n_pos: positives.len(),
        n_neg: negatives.len(),
    })
}

/// Uniform seeded sample of `n` items from every class except `class`.
///
/// `by_class[c]` lists the candidate items of class `c`. The pool is visited
/// in class order, shuffled, and its first `n` entries are returned.
pub fn sample_negatives<T: Clone>(by_class: &[Vec<T>], class: usize, n: usize, seed: u64) -> Result<Vec<T>> {
    let mut pool: Vec<T> = by_class
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != class)
        .flat_map(|(_, items)| items.iter().cloned())
        .collect();
    if pool.len() < n {
        return Err(Error::invalid(format!(
            "only {} negative candidates outside class {class}, need {n}",
            pool.len()
        )));
    }
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    pool.truncate(n);
    Ok(pool)
}

/// Seeded isotropic unit vectors.
pub fn random_cavs(dim: usize, count: usize, seed: u64) -> Result<Vec<Vec<f32>>> {
    if dim == 0 {
        return Err(Error::invalid("dimension must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            out.push(v.iter().map(|x| (x / norm) as f32).collect());
        }
    }
    Ok(out)
}
