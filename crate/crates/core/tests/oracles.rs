//! Library results against independent naive-loop oracles.

use horkd::data::eval::{topk_error, verify_pairs, VerificationPair, VerificationPairSet};
use horkd::losses::{
    center_loss, compute_class_centers, order1_loss, order2_loss, order3_loss, total_distill_loss, ClassCenters,
    FeatureBatch, LossWeights,
};
use horkd::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::*;

struct Values {
    l1: f64,
    l2: f64,
    l3: f64,
    lc: f64,
}

fn library(f: &FeatureBatch<f64>, g: &Rows, centers: &ClassCenters<f64>, delta: f64) -> Values {
    let eval = |which: usize| {
        let mut gr = Graph::new();
        let v = gr.leaf(Tensor::from_rows(g).unwrap(), true);
        let out = match which {
            0 => order1_loss(&mut gr, f, v),
            1 => order2_loss(&mut gr, f, v),
            2 => order3_loss(&mut gr, f, v, delta, 4960, 0),
            _ => center_loss(&mut gr, f, v, centers),
        }
        .unwrap();
        gr.value(out).item()
    };
    Values {
        l1: eval(0),
        l2: eval(1),
        l3: eval(2),
        lc: eval(3),
    }
}

fn close(name: &str, got: f64, want: f64) {
    assert!(
        (got - want).abs() <= TOL * want.abs().max(1.0),
        "{name}: library {got} vs oracle {want}"
    );
}

#[test]
fn losses_and_centers_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..20 {
        let m = rng.random_range(3..=8);
        let d = rng.random_range(1..=6);
        let c = rng.random_range(1..=5);
        let delta = [1.0, 0.3][rng.random_range(0..2)];
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();
        let f = random_rows(&mut rng, m, d);
        let g = random_rows(&mut rng, m, d);

        let pool_n = rng.random_range(1..=12);
        let pool = random_rows(&mut rng, pool_n, d);
        let pool_labels: Vec<usize> = (0..pool_n).map(|_| rng.random_range(0..c)).collect();
        let centers = compute_class_centers(&batch(&pool, &pool_labels), c).unwrap();
        let (oc, counts) = oracle_centers(&pool, &pool_labels, c);
        assert_eq!(centers.counts(), &counts[..]);
        for (cls, want) in oc.iter().enumerate() {
            if counts[cls] > 0 {
                for (a, b) in centers.center(cls).iter().zip(want) {
                    close("center", *a, *b);
                }
            }
        }

        let v = library(&batch(&f, &labels), &g, &centers, delta);
        close("l1", v.l1, oracle_l1(&f, &g));
        close("l2", v.l2, oracle_l2(&f, &g));
        close("l3", v.l3, oracle_l3(&f, &g, delta));
        close("lc", v.lc, oracle_lc(&f, &g, &oc, &counts));
    }
}

#[test]
fn default_total_composes_the_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let labels = [0, 1, 2, 0, 1, 2];
    let f = random_rows(&mut rng, 6, 4);
    let g = random_rows(&mut rng, 6, 4);
    let fb = batch(&f, &labels);
    let centers = compute_class_centers(&fb, 3).unwrap();
    let (oc, counts) = oracle_centers(&f, &labels, 3);
    let mut gr = Graph::new();
    let v = gr.leaf(Tensor::from_rows(&g).unwrap(), true);
    let total = total_distill_loss(&mut gr, &fb, v, &centers, &LossWeights::default(), 0).unwrap();
    let want = 0.02 * oracle_l2(&f, &g) + 0.01 * oracle_l3(&f, &g, 1.0) + oracle_lc(&f, &g, &oc, &counts);
    close("total", gr.value(total.value).item(), want);
    assert!(total.breakdown.l1.is_none());
}

#[test]
fn spec_examples() {
    let f = batch(&vec![vec![1.0, 2.0]], &[0]);
    let mut gr = Graph::new();
    let v = gr.leaf(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap(), true);
    let l = order1_loss(&mut gr, &f, v).unwrap();
    assert_eq!(gr.value(l).item(), 3.0);

    let all = batch(&vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![5.0, 5.0]], &[0, 0, 1]);
    let centers = compute_class_centers(&all, 2).unwrap();
    assert_eq!(centers.center(0), &[1.0, 0.0]);
    assert_eq!(centers.center(1), &[5.0, 5.0]);
}

#[test]
fn topk_and_verification_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..20 {
        let m = rng.random_range(1..=8);
        let c = rng.random_range(2..=5);
        // coarse values so ties actually occur
        let logits: Rows = (0..m)
            .map(|_| (0..c).map(|_| rng.random_range(0..4) as f64 * 0.5).collect())
            .collect();
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();
        let t = Tensor::from_rows(&logits).unwrap();
        for k in 1..=c {
            close("topk", topk_error(&t, &labels, k).unwrap(), oracle_topk(&logits, &labels, k));
        }

        let n = rng.random_range(2..=8);
        let d = rng.random_range(1..=6);
        let mut emb = random_rows(&mut rng, n, d);
        if rng.random_bool(0.3) {
            emb[0] = vec![0.0; d];
        }
        let per_side = rng.random_range(1..=4);
        let mut pairs = Vec::new();
        for same in [true, false] {
            for _ in 0..per_side {
                pairs.push((rng.random_range(0..n), rng.random_range(0..n), same));
            }
        }
        let set = VerificationPairSet::new(
            pairs
                .iter()
                .map(|&(a, b, same_class)| VerificationPair { a, b, same_class })
                .collect(),
        )
        .unwrap();
        let et = Tensor::from_rows(&emb).unwrap();
        for thr in [-0.5, 0.0, 0.3, 0.9] {
            close("verify", verify_pairs(&et, &set, thr).unwrap(), oracle_verify(&emb, &pairs, thr));
        }
    }
}
