//! Relational distillation losses between a constant teacher stream `F` and
//! a differentiable student stream `G`.
//!
//! Every loss takes the teacher batch as plain data and the student batch as
//! an `m×d` node on a [`Graph`]; no gradient ever reaches the teacher side.
//! Losses are means over their tuple sets so magnitudes do not grow with the
//! batch size.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{kernels, Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::losses::types::{pairwise_stats, ClassCenters, FeatureBatch, LossWeights};
use crate::scalar::{epsilon, Scalar};
use crate::tensor::Tensor;

fn check_student<T: Scalar>(g: &Graph<T>, teacher: &FeatureBatch<T>, student: Var) -> Result<()> {
    if g.shape(student) != teacher.features().shape() {
        return Err(Error::Shape {
            op: "distillation loss",
            left: teacher.features().shape().to_vec(),
            right: g.shape(student).to_vec(),
        });
    }
    Ok(())
}

fn need(what: &'static str, needed: usize, got: usize) -> Result<()> {
    if got < needed {
        return Err(Error::InsufficientBatch { what, needed, got });
    }
    Ok(())
}

/// Batch mean of the per-example L1 distance between teacher and student
/// embeddings.
pub fn order1_loss<T: Scalar>(g: &mut Graph<T>, teacher: &FeatureBatch<T>, student: Var) -> Result<Var> {
    check_student(g, teacher, student)?;
    let f = g.constant(teacher.features().clone());
    let diff = g.sub(student, f)?;
    let abs = g.abs(diff);
    let total = g.sum(abs);
    Ok(g.scale(total, T::one() / T::of_usize(teacher.len())))
}

/// Mean over distinct pairs of the squared difference between the
/// mean-normalized pairwise distances of the two streams.
pub fn order2_loss<T: Scalar>(g: &mut Graph<T>, teacher: &FeatureBatch<T>, student: Var) -> Result<Var> {
    check_student(g, teacher, student)?;
    let m = teacher.len();
    need("order-2 loss", 2, m)?;
    let inv_pairs = T::one() / T::of_usize(m * (m - 1));

    let target = g.constant(pairwise_stats(teacher)?.potentials());
    let dist = g.pairwise_distances(student)?;
    let total = g.sum(dist);
    let mu = g.scale(total, inv_pairs);
    let den = g.clamp_min(mu, epsilon());
    let psi = g.div(dist, den)?;
    let diff = g.sub(psi, target)?;
    let sq = g.square(diff);
    let sum = g.sum(sq);
    // the full matrix holds each unordered pair twice
    Ok(g.scale(sum, inv_pairs))
}

/// Cosine of the angle at `fj` formed with `fi` and `fk`, in `[-1, 1]`.
///
/// A zero-length edge yields 0.
pub fn angle_potential<T: Scalar>(fi: &[T], fj: &[T], fk: &[T]) -> T {
    kernels::vertex_cosine(fi, fj, fk)
}

fn choose3(m: usize) -> usize {
    if m < 3 {
        0
    } else {
        m * (m - 1) * (m - 2) / 6
    }
}

/// Inverse of the lexicographic rank of `{i < j < k}` among 3-subsets of `0..m`.
fn unrank_triplet(mut rank: usize, m: usize) -> [usize; 3] {
    let mut i = 0;
    loop {
        let rest = m - i - 1;
        let block = rest * (rest - 1) / 2;
        if rank < block {
            break;
        }
        rank -= block;
        i += 1;
    }
    let mut j = i + 1;
    loop {
        let block = m - j - 1;
        if rank < block {
            break;
        }
        rank -= block;
        j += 1;
    }
    [i, j, j + 1 + rank]
}

/// Unordered triplets `i < j < k` used by the angle loss.
///
/// All `C(m, 3)` triplets in lexicographic order when there are at most
/// `max_triplets` of them, otherwise exactly `max_triplets` distinct triplets
/// drawn uniformly with a generator seeded by `seed`, in lexicographic order.
pub fn select_triplets(m: usize, max_triplets: usize, seed: u64) -> Result<Vec<[usize; 3]>> {
    need("triplet selection", 3, m)?;
    if max_triplets == 0 {
        return Err(invalid("select_triplets", "max_triplets must be positive"));
    }
    let total = choose3(m);
    if total <= max_triplets {
        return Ok((0..total).map(|r| unrank_triplet(r, m)).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ranks = index::sample(&mut rng, total, max_triplets).into_vec();
    ranks.sort_unstable();
    Ok(ranks.into_iter().map(|r| unrank_triplet(r, m)).collect())
}

/// The three vertex angles of each unordered triplet, as
/// `[end, vertex, end]` index triples.
pub fn vertex_triples(triplets: &[[usize; 3]]) -> Vec<[usize; 3]> {
    triplets
        .iter()
        .flat_map(|&[i, j, k]| [[j, i, k], [i, j, k], [i, k, j]])
        .collect()
}

/// Mean Huber penalty on the difference of angle potentials.
///
/// Each selected triplet contributes the angles at all three of its
/// vertices, so the loss does not depend on the order of the batch.
pub fn order3_loss<T: Scalar>(
    g: &mut Graph<T>,
    teacher: &FeatureBatch<T>,
    student: Var,
    delta: T,
    max_triplets: usize,
    seed: u64,
) -> Result<Var> {
    check_student(g, teacher, student)?;
    need("order-3 loss", 3, teacher.len())?;
    let triples = vertex_triples(&select_triplets(teacher.len(), max_triplets, seed)?);
    let target: Vec<T> = triples
        .iter()
        .map(|&[i, j, k]| angle_potential(teacher.row(i), teacher.row(j), teacher.row(k)))
        .collect();
    let target = g.constant(Tensor::vector(target));
    let cos = g.triplet_cosines(student, &triples)?;
    let diff = g.sub(cos, target)?;
    let h = g.huber(diff, delta)?;
    Ok(g.mean(h))
}

/// Per-class mean of the teacher features over a full training set.
///
/// Classes without examples keep a zero center and a zero count.
pub fn compute_class_centers<T: Scalar>(all: &FeatureBatch<T>, num_classes: usize) -> Result<ClassCenters<T>> {
    if let Some(&bad) = all.labels().iter().find(|&&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: num_classes,
        });
    }
    let d = all.dim();
    let mut sums = vec![T::zero(); num_classes * d];
    let mut counts = vec![0usize; num_classes];
    for (i, &l) in all.labels().iter().enumerate() {
        counts[l] += 1;
        for (s, &x) in sums[l * d..(l + 1) * d].iter_mut().zip(all.row(i)) {
            *s += x;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            let n = T::of_usize(n);
            for s in &mut sums[c * d..(c + 1) * d] {
                *s /= n;
            }
        }
    }
    Ok(ClassCenters::from_parts(Tensor::new(vec![num_classes, d], sums)?, counts))
}

/// Mean over examples and non-empty classes of the squared difference
/// between each stream's distance to the shared teacher class centers.
pub fn center_loss<T: Scalar>(
    g: &mut Graph<T>,
    teacher: &FeatureBatch<T>,
    student: Var,
    centers: &ClassCenters<T>,
) -> Result<Var> {
    check_student(g, teacher, student)?;
    if centers.dim() != teacher.dim() {
        return Err(Error::Shape {
            op: "center_loss",
            left: teacher.features().shape().to_vec(),
            right: centers.centers().shape().to_vec(),
        });
    }
    let active = centers.active_centers();
    let c = active.shape()[0];
    if c == 0 {
        return Err(invalid("center_loss", "no class has a center"));
    }
    let m = teacher.len();
    let d = teacher.dim();
    let target = kernels::center_distances(teacher.features().data(), active.data(), m, c, d);
    let target = g.constant(Tensor::new(vec![m, c], target)?);
    let dist = g.center_distances(student, &active)?;
    let diff = g.sub(dist, target)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// Unweighted value of each distillation term; `None` for disabled terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown<T> {
    pub l1: Option<T>,
    pub l2: Option<T>,
    pub l3: Option<T>,
    pub lc: Option<T>,
    /// Weighted sum of the enabled terms.
    pub total: T,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn terms(&self) -> [(&'static str, Option<T>); 4] {
        [("l1", self.l1), ("l2", self.l2), ("l3", self.l3), ("lc", self.lc)]
    }

    /// Recomputes the weighted sum from the logged terms.
    pub fn recombine(&self, w: &LossWeights) -> T {
        let term = |v: Option<T>, weight: f64| v.map_or(T::zero(), |x| T::of(weight) * x);
        term(self.l1, 1.0) + term(self.l2, w.alpha) + term(self.l3, w.beta) + term(self.lc, w.gamma)
    }
}

pub struct DistillLoss<T> {
    pub value: Var,
    pub breakdown: LossBreakdown<T>,
}

/// `[order1]·L1 + α·L2 + β·L3 + γ·LC`, skipping terms that are disabled or
/// carry a zero weight. With nothing enabled the value is a constant zero.
pub fn total_distill_loss<T: Scalar>(
    g: &mut Graph<T>,
    teacher: &FeatureBatch<T>,
    student: Var,
    centers: &ClassCenters<T>,
    w: &LossWeights,
    seed: u64,
) -> Result<DistillLoss<T>> {
    check_student(g, teacher, student)?;
    let m = teacher.len();
    if w.alpha > 0.0 {
        need("order-2 loss", 2, m)?;
    }
    if w.beta > 0.0 {
        need("order-3 loss", 3, m)?;
    }

    let mut breakdown = LossBreakdown::default();
    let mut parts: Vec<Var> = Vec::new();
    if w.include_order1 {
        let l = order1_loss(g, teacher, student)?;
        breakdown.l1 = Some(g.value(l).item());
        parts.push(l);
    }
    if w.alpha > 0.0 {
        let l = order2_loss(g, teacher, student)?;
        breakdown.l2 = Some(g.value(l).item());
        parts.push(g.scale(l, T::of(w.alpha)));
    }
    if w.beta > 0.0 {
        let l = order3_loss(g, teacher, student, T::of(w.huber_delta), w.max_triplets, seed)?;
        breakdown.l3 = Some(g.value(l).item());
        parts.push(g.scale(l, T::of(w.beta)));
    }
    if w.gamma > 0.0 {
        let l = center_loss(g, teacher, student, centers)?;
        breakdown.lc = Some(g.value(l).item());
        parts.push(g.scale(l, T::of(w.gamma)));
    }

    let value = match parts.split_first() {
        None => g.constant(Tensor::scalar(T::zero())),
        Some((&first, rest)) => {
            let mut acc = first;
            for &p in rest {
                acc = g.add(acc, p)?;
            }
            acc
        }
    };
    breakdown.total = g.value(value).item();
    Ok(DistillLoss { value, breakdown })
}
