//! Value-only kernels shared by the graph ops and by code that works on
//! constant (teacher-side) tensors.

use crate::scalar::{epsilon, Scalar};

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn l2norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

pub fn distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc.sqrt()
}

/// `[m×k]·[k×n]` into a fresh `[m×n]` buffer.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aik = a[i * k + p];
            if aik == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// Full `m×m` matrix of Euclidean distances between the rows of `x`.
pub fn pairwise_distances<T: Scalar>(x: &[T], m: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * m];
    for i in 0..m {
        for j in (i + 1)..m {
            let dist = distance(&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d]);
            out[i * m + j] = dist;
            out[j * m + i] = dist;
        }
    }
    out
}

/// `m×c` distances from each row of `x` to each row of `centers`.
pub fn center_distances<T: Scalar>(x: &[T], centers: &[T], m: usize, c: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * c];
    for i in 0..m {
        for k in 0..c {
            out[i * c + k] = distance(&x[i * d..(i + 1) * d], &centers[k * d..(k + 1) * d]);
        }
    }
    out
}

/// Cosine of the angle at `vertex` between the edges to `a` and `b`.
///
/// Returns 0 when either edge is shorter than the epsilon guard; otherwise the
/// cosine clamped to `[-1, 1]`.
pub fn vertex_cosine<T: Scalar>(a: &[T], vertex: &[T], b: &[T]) -> T {
    let eps = epsilon::<T>();
    let mut ea2 = T::zero();
    let mut eb2 = T::zero();
    let mut cross = T::zero();
    for ((&x, &v), &y) in a.iter().zip(vertex).zip(b) {
        let ea = x - v;
        let eb = y - v;
        ea2 += ea * ea;
        eb2 += eb * eb;
        cross += ea * eb;
    }
    let (na, nb) = (ea2.sqrt(), eb2.sqrt());
    if na <= eps || nb <= eps {
        return T::zero();
    }
    (cross / (na * nb)).max(-T::one()).min(T::one())
}

/// Row-wise softmax of `logits / temperature`.
pub fn softmax_rows<T: Scalar>(logits: &[T], m: usize, c: usize, temperature: T) -> Vec<T> {
    let mut out = vec![T::zero(); m * c];
    for i in 0..m {
        let row = &logits[i * c..(i + 1) * c];
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut total = T::zero();
        for (o, &z) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
            *o = ((z - max) / temperature).exp();
            total += *o;
        }
        for o in &mut out[i * c..(i + 1) * c] {
            *o /= total;
        }
    }
    out
}

/// Row-wise log-softmax of `logits / temperature`.
pub fn log_softmax_rows<T: Scalar>(logits: &[T], m: usize, c: usize, temperature: T) -> Vec<T> {
    let mut out = vec![T::zero(); m * c];
    for i in 0..m {
        let row = &logits[i * c..(i + 1) * c];
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut total = T::zero();
        for &z in row {
            total += ((z - max) / temperature).exp();
        }
        let lse = total.ln();
        for (o, &z) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
            *o = (z - max) / temperature - lse;
        }
    }
    out
}

pub fn huber<T: Scalar>(x: T, delta: T) -> T {
    let ax = x.abs();
    if ax <= delta {
        T::of(0.5) * x * x
    } else {
        delta * (ax - T::of(0.5) * delta)
    }
}

pub fn huber_slope<T: Scalar>(x: T, delta: T) -> T {
    if x.abs() <= delta {
        x
    } else {
        delta * x.signum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn huber_regimes() {
        assert_eq!(huber(0.5f64, 1.0), 0.125);
        assert_eq!(huber(2.0f64, 1.0), 1.5);
        assert_eq!(huber(-2.0f64, 1.0), 1.5);
    }

    #[test]
    fn cosine_guards_degenerate_edges() {
        assert_eq!(vertex_cosine(&[1.0f64, 0.0], &[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(vertex_cosine(&[1.0f64, 0.0], &[0.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(vertex_cosine(&[1.0f64, 0.0], &[0.0, 0.0], &[1.0, 0.0]), 1.0);
    }
}
