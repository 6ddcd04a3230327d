//! Identification and verification metrics.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::scalar::{epsilon, Scalar};
use crate::tensor::Tensor;

/// Rank of class `label` in one row of logits: the number of classes that
/// beat it. Equal scores go to the lower class index.
fn rank_of<T: Scalar>(row: &[T], label: usize) -> usize {
    let z = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > z || (v == z && j < label))
        .count()
}

/// Fraction of rows whose true label is not among the `k` highest logits.
pub fn topk_error<T: Scalar>(logits: &Tensor<T>, labels: &[usize], k: usize) -> Result<f64> {
    let (m, c) = logits.dims2()?;
    if k == 0 || k > c {
        return Err(invalid("topk_error", format!("k = {k} outside 1..={c}")));
    }
    if labels.len() != m {
        return Err(invalid("topk_error", format!("{} labels for {m} rows", labels.len())));
    }
    let mut misses = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::LabelOutOfRange { label: l, classes: c });
        }
        if rank_of(logits.row(i), l) >= k {
            misses += 1;
        }
    }
    Ok(misses as f64 / m as f64)
}

pub fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    Ok(1.0 - topk_error(logits, labels, 1)?)
}

/// Index with the highest logit, lower index on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerificationPair {
    pub a: usize,
    pub b: usize,
    pub same_class: bool,
}

/// Balanced set of same-class and different-class index pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerificationPairSet {
    pairs: Vec<VerificationPair>,
}

impl VerificationPairSet {
    pub fn new(pairs: Vec<VerificationPair>) -> Result<Self> {
        let positives = pairs.iter().filter(|p| p.same_class).count();
        if positives * 2 != pairs.len() {
            return Err(invalid(
                "verification pairs",
                format!("{positives} positives out of {} pairs is not balanced", pairs.len()),
            ));
        }
        Ok(Self { pairs })
    }

    /// Draws `per_side` positive and `per_side` negative pairs from `labels`.
    pub fn sample(labels: &[usize], per_side: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = labels.len();
        let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, &l) in labels.iter().enumerate() {
            by_class.entry(l).or_default().push(i);
        }
        let pos_classes: Vec<&Vec<usize>> = by_class.values().filter(|v| v.len() >= 2).collect();
        if pos_classes.is_empty() || by_class.len() < 2 {
            return Err(invalid(
                "verification pairs",
                "need two classes and a class with two examples",
            ));
        }
        let mut pairs = Vec::with_capacity(2 * per_side);
        for _ in 0..per_side {
            let members = pos_classes[rng.random_range(0..pos_classes.len())];
            let picked: Vec<&usize> = members.choose_multiple(&mut rng, 2).collect();
            pairs.push(VerificationPair {
                a: *picked[0],
                b: *picked[1],
                same_class: true,
            });
        }
        while pairs.len() < 2 * per_side {
            let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
            if labels[a] != labels[b] {
                pairs.push(VerificationPair {
                    a,
                    b,
                    same_class: false,
                });
            }
        }
        Self::new(pairs)
    }

    pub fn pairs(&self) -> &[VerificationPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Cosine similarity; 0 when either vector has (near) zero norm.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut ab = T::zero();
    let mut aa = T::zero();
    let mut bb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let (na, nb) = (aa.sqrt(), bb.sqrt());
    if na <= epsilon() || nb <= epsilon() {
        return T::zero();
    }
    ab / (na * nb)
}

fn pair_similarities<T: Scalar>(embeddings: &Tensor<T>, pairs: &VerificationPairSet) -> Result<Vec<T>> {
    let (m, _) = embeddings.dims2()?;
    pairs
        .pairs()
        .iter()
        .map(|p| {
            if p.a >= m || p.b >= m {
                return Err(invalid(
                    "verify_pairs",
                    format!("pair ({}, {}) out of range for {m} embeddings", p.a, p.b),
                ));
            }
            Ok(cosine_similarity(embeddings.row(p.a), embeddings.row(p.b)))
        })
        .collect()
}

fn accuracy_at<T: Scalar>(sims: &[T], pairs: &VerificationPairSet, threshold: T) -> f64 {
    let correct = sims
        .iter()
        .zip(pairs.pairs())
        .filter(|(&s, p)| (s > threshold) == p.same_class)
        .count();
    correct as f64 / pairs.len() as f64
}

/// Fraction of pairs classified correctly by `cosine > threshold`.
pub fn verify_pairs<T: Scalar>(embeddings: &Tensor<T>, pairs: &VerificationPairSet, threshold: T) -> Result<f64> {
    if pairs.is_empty() {
        return Err(invalid("verify_pairs", "empty pair set"));
    }
    let sims = pair_similarities(embeddings, pairs)?;
    Ok(accuracy_at(&sims, pairs, threshold))
}

/// Best `(threshold, accuracy)` over 101 evenly spaced thresholds in
/// `[-1, 1]`; the lowest such threshold wins ties.
pub fn verify_pairs_sweep<T: Scalar>(embeddings: &Tensor<T>, pairs: &VerificationPairSet) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(invalid("verify_pairs", "empty pair set"));
    }
    let sims = pair_similarities(embeddings, pairs)?;
    let mut best = (f64::NAN, -1.0);
    for i in 0..=100 {
        let t = -1.0 + 2.0 * i as f64 / 100.0;
        let acc = accuracy_at(&sims, pairs, T::of(t));
        if acc > best.1 {
            best = (t, acc);
        }
    }
    Ok(best)
}
