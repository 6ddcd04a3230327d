//! Naive-loop oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use horkd::losses::FeatureBatch;
use horkd::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-12;
pub const EPS: f64 = 1e-12;

pub type Rows = Vec<Vec<f64>>;

pub fn random_rows(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Rows {
    (0..m).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

pub fn batch(rows: &Rows, labels: &[usize]) -> FeatureBatch<f64> {
    FeatureBatch::new(Tensor::from_rows(rows).unwrap(), labels.to_vec()).unwrap()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += (a[k] - b[k]) * (a[k] - b[k]);
    }
    s.sqrt()
}

pub fn huber(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        0.5 * x * x
    } else {
        delta * (x.abs() - 0.5 * delta)
    }
}

pub fn oracle_l1(f: &Rows, g: &Rows) -> f64 {
    let mut total = 0.0;
    for i in 0..f.len() {
        for k in 0..f[i].len() {
            total += (f[i][k] - g[i][k]).abs();
        }
    }
    total / f.len() as f64
}

pub fn oracle_l2(f: &Rows, g: &Rows) -> f64 {
    let m = f.len();
    let mu = |x: &Rows| {
        let (mut s, mut n) = (0.0, 0.0);
        for i in 0..m {
            for j in i + 1..m {
                s += dist(&x[i], &x[j]);
                n += 1.0;
            }
        }
        s / n
    };
    let (mf, mg) = (mu(f), mu(g));
    let (mut s, mut n) = (0.0, 0.0);
    for i in 0..m {
        for j in i + 1..m {
            let pf = dist(&f[i], &f[j]) / mf.max(EPS);
            let pg = dist(&g[i], &g[j]) / mg.max(EPS);
            s += (pf - pg) * (pf - pg);
            n += 1.0;
        }
    }
    s / n
}

/// Cosine of the angle at vertex `j`.
pub fn oracle_angle(i: &[f64], j: &[f64], k: &[f64]) -> f64 {
    let (ni, nk) = (dist(i, j), dist(k, j));
    if ni <= EPS || nk <= EPS {
        return 0.0;
    }
    let mut dot = 0.0;
    for t in 0..i.len() {
        dot += (i[t] - j[t]) / ni * ((k[t] - j[t]) / nk);
    }
    dot.clamp(-1.0, 1.0)
}

/// Every unordered triplet contributes the angle at each of its vertices.
pub fn oracle_l3(f: &Rows, g: &Rows, delta: f64) -> f64 {
    let m = f.len();
    let (mut s, mut n) = (0.0, 0.0);
    for i in 0..m {
        for j in i + 1..m {
            for k in j + 1..m {
                for (a, v, b) in [(i, j, k), (j, i, k), (i, k, j)] {
                    let d = oracle_angle(&f[a], &f[v], &f[b]) - oracle_angle(&g[a], &g[v], &g[b]);
                    s += huber(d, delta);
                    n += 1.0;
                }
            }
        }
    }
    s / n
}

pub fn oracle_centers(f: &Rows, labels: &[usize], c: usize) -> (Rows, Vec<usize>) {
    let d = f[0].len();
    let mut sums = vec![vec![0.0; d]; c];
    let mut counts = vec![0usize; c];
    for (row, &l) in f.iter().zip(labels) {
        counts[l] += 1;
        for k in 0..d {
            sums[l][k] += row[k];
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            for v in s.iter_mut() {
                *v /= n as f64;
            }
        }
    }
    (sums, counts)
}

pub fn oracle_lc(f: &Rows, g: &Rows, centers: &Rows, counts: &[usize]) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for i in 0..f.len() {
        for c in 0..centers.len() {
            if counts[c] == 0 {
                continue;
            }
            let diff = dist(&f[i], &centers[c]) - dist(&g[i], &centers[c]);
            s += diff * diff;
            n += 1.0;
        }
    }
    s / n
}

pub fn oracle_topk(logits: &Rows, labels: &[usize], k: usize) -> f64 {
    let mut misses = 0;
    for (row, &l) in logits.iter().zip(labels) {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        if !order[..k].contains(&l) {
            misses += 1;
        }
    }
    misses as f64 / logits.len() as f64
}

pub fn oracle_verify(emb: &Rows, pairs: &[(usize, usize, bool)], threshold: f64) -> f64 {
    let mut correct = 0;
    for &(a, b, same) in pairs {
        let (x, y) = (&emb[a], &emb[b]);
        let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
        for t in 0..x.len() {
            xy += x[t] * y[t];
            xx += x[t] * x[t];
            yy += y[t] * y[t];
        }
        let sim = if xx.sqrt() <= EPS || yy.sqrt() <= EPS {
            0.0
        } else {
            xy / (xx.sqrt() * yy.sqrt())
        };
        if (sim > threshold) == same {
            correct += 1;
        }
    }
    correct as f64 / pairs.len() as f64
}

