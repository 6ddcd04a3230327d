use serde::{Deserialize, Serialize};

use crate::autodiff::kernels;
use crate::error::{invalid, Error, Result};
use crate::scalar::{epsilon, Scalar};
use crate::tensor::Tensor;

/// An `m×d` batch of embeddings with one class label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch<T> {
    features: Tensor<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> FeatureBatch<T> {
    pub fn new(features: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        let (m, _) = features.dims2()?;
        if labels.len() != m {
            return Err(invalid(
                "feature_batch",
                format!("{} labels for {m} feature rows", labels.len()),
            ));
        }
        if !features.is_finite() {
            return Err(invalid("feature_batch", "non-finite feature value"));
        }
        Ok(Self { features, labels })
    }

    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.features.row(i)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Checks that `other` is index-aligned with `self`: same size, same
    /// embedding width and the same label sequence.
    pub fn check_aligned(&self, other: &Self) -> Result<()> {
        if self.features.shape() != other.features.shape() {
            return Err(Error::Shape {
                op: "aligned batches",
                left: self.features.shape().to_vec(),
                right: other.features.shape().to_vec(),
            });
        }
        if self.labels != other.labels {
            return Err(invalid("aligned batches", "label order differs between streams"));
        }
        Ok(())
    }
}

/// Per-class mean embeddings of a frozen teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCenters<T> {
    centers: Tensor<T>,
    counts: Vec<usize>,
}

impl<T: Scalar> ClassCenters<T> {
    pub(crate) fn from_parts(centers: Tensor<T>, counts: Vec<usize>) -> Self {
        Self { centers, counts }
    }

    /// `C×d`; rows of empty classes are zero.
    pub fn centers(&self) -> &Tensor<T> {
        &self.centers
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.centers.shape()[1]
    }

    pub fn center(&self, class: usize) -> &[T] {
        self.centers.row(class)
    }

    /// Classes with at least one contributing example.
    pub fn active_classes(&self) -> Vec<usize> {
        (0..self.counts.len()).filter(|&c| self.counts[c] > 0).collect()
    }

    /// Centers of the active classes only, as a `C'×d` matrix.
    pub fn active_centers(&self) -> Tensor<T> {
        self.centers.select_rows(&self.active_classes())
    }
}

/// Pairwise distances of one stream and their mean over distinct pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseStats<T> {
    pub distances: Tensor<T>,
    pub mu: T,
}

impl<T: Scalar> PairwiseStats<T> {
    /// Normalized distance potential `d(i, j) / max(mu, 1e-12)`.
    pub fn potential(&self, i: usize, j: usize) -> T {
        let m = self.distances.shape()[0];
        self.distances.data()[i * m + j] / self.mu.max(epsilon())
    }

    /// The full `m×m` matrix of normalized potentials.
    pub fn potentials(&self) -> Tensor<T> {
        let den = self.mu.max(epsilon());
        self.distances.map(|d| d / den)
    }
}

pub fn pairwise_stats<T: Scalar>(batch: &FeatureBatch<T>) -> Result<PairwiseStats<T>> {
    let m = batch.len();
    if m < 2 {
        return Err(Error::InsufficientBatch {
            what: "pairwise statistics",
            needed: 2,
            got: m,
        });
    }
    let d = batch.dim();
    let dist = kernels::pairwise_distances(batch.features().data(), m, d);
    // full-matrix sum counts every unordered pair twice
    let total = dist.iter().fold(T::zero(), |acc, &x| acc + x);
    let mu = total * (T::one() / T::of_usize(m * (m - 1)));
    Ok(PairwiseStats {
        distances: Tensor::new(vec![m, m], dist)?,
        mu,
    })
}

/// Weights of the combined distillation objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub include_order1: bool,
    pub huber_delta: f64,
    pub max_triplets: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.02,
            beta: 0.01,
            gamma: 1.0,
            include_order1: false,
            huber_delta: 1.0,
            max_triplets: 4960,
        }
    }
}

impl LossWeights {
    /// No distillation term enabled.
    pub fn none() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            include_order1: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("weights.{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.huber_delta > 0.0 && self.huber_delta.is_finite()) {
            return Err(Error::Config(format!(
                "weights.huber_delta must be > 0, got {}",
                self.huber_delta
            )));
        }
        if self.max_triplets == 0 {
            return Err(Error::Config("weights.max_triplets must be positive".into()));
        }
        Ok(())
    }

    pub fn is_distilling(&self) -> bool {
        self.include_order1 || self.alpha > 0.0 || self.beta > 0.0 || self.gamma > 0.0
    }

    /// Smallest batch for which every enabled term is defined.
    pub fn min_batch(&self) -> usize {
        if self.beta > 0.0 {
            3
        } else if self.alpha > 0.0 {
            2
        } else {
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[Vec<f64>]) -> FeatureBatch<f64> {
        FeatureBatch::new(Tensor::from_rows(rows).unwrap(), vec![0; rows.len()]).unwrap()
    }

    #[test]
    fn single_pair_normalizes_to_one() {
        let s = pairwise_stats(&batch(&[vec![1.0, 2.0], vec![4.0, -2.0]])).unwrap();
        assert_eq!(s.mu, 5.0);
        assert_eq!(s.potential(0, 1), 1.0);
        assert_eq!(s.potential(1, 0), 1.0);
    }

    #[test]
    fn identical_rows_give_zero_potentials() {
        let s = pairwise_stats(&batch(&vec![vec![1.0, 2.0]; 4])).unwrap();
        assert_eq!(s.mu, 0.0);
        assert!(s.potentials().data().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn potentials_cancel_uniform_scale() {
        let base = vec![vec![0.1, 2.0], vec![-1.0, 0.3], vec![0.7, 0.7], vec![3.0, -2.0]];
        let scaled: Vec<Vec<f64>> = base.iter().map(|r| r.iter().map(|x| 3.7 * x).collect()).collect();
        let (a, b) = (
            pairwise_stats(&batch(&base)).unwrap().potentials(),
            pairwise_stats(&batch(&scaled)).unwrap().potentials(),
        );
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn stats_need_two_rows() {
        assert!(matches!(
            pairwise_stats(&batch(&[vec![1.0]])),
            Err(Error::InsufficientBatch { needed: 2, got: 1, .. })
        ));
    }

    #[test]
    fn stats_matrix_is_symmetric_with_zero_diagonal() {
        let s = pairwise_stats(&batch(&[vec![0.0, 1.0], vec![2.0, 2.0], vec![-1.0, 0.5]])).unwrap();
        let m = 3;
        let d = s.distances.data();
        for i in 0..m {
            assert_eq!(d[i * m + i], 0.0);
            for j in 0..m {
                assert_eq!(d[i * m + j], d[j * m + i]);
            }
        }
        assert!(s.mu >= 0.0);
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.alpha, w.beta, w.gamma), (0.02, 0.01, 1.0));
        assert!(!w.include_order1);
        assert_eq!(w.huber_delta, 1.0);
        assert_eq!(w.max_triplets, 4960);
        assert_eq!(w.min_batch(), 3);
    }

    #[test]
    fn misaligned_labels_rejected() {
        let a = FeatureBatch::new(Tensor::<f64>::zeros(vec![2, 2]), vec![0, 1]).unwrap();
        let b = FeatureBatch::new(Tensor::<f64>::zeros(vec![2, 2]), vec![1, 0]).unwrap();
        assert!(a.check_aligned(&b).is_err());
    }
}
