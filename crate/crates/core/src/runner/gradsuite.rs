//! Finite-difference checks over every graph op and every loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::gradcheck::{analytic_gradient, compare_with_central_differences};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::losses::{
    center_loss, compute_class_centers, order1_loss, order2_loss, order3_loss, select_triplets, total_distill_loss,
    vertex_triples, ClassCenters, FeatureBatch, LossWeights,
};
use crate::tensor::Tensor;

pub const THRESHOLD: f64 = 1e-4;
pub const EPS: f64 = 1e-5;
pub const TRIALS: u64 = 10;

const M: usize = 5;
const D: usize = 3;
const C: usize = 3;

/// Random constants shared by the cases of one trial.
pub struct Fixture {
    pub a: Tensor<f64>,
    pub w: Tensor<f64>,
    pub right: Tensor<f64>,
    pub left: Tensor<f64>,
    pub bias: Tensor<f64>,
    pub labels: Vec<usize>,
    pub teacher_logits: Tensor<f64>,
    pub teacher: FeatureBatch<f64>,
    pub centers: ClassCenters<f64>,
}

/// Standard normal values pushed at least 0.2 away from zero so that no
/// coordinate sits on a kink of relu, abs or clamp.
fn nondegenerate(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v.signum() * (v.abs() + 0.2)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("nonempty shape")
}

impl Fixture {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<usize> = (0..M).map(|i| i % C).collect();
        labels.swap(0, rng.random_range(0..M));
        let teacher = FeatureBatch::new(nondegenerate(&mut rng, &[M, D]), labels.clone()).expect("aligned");
        let pool = FeatureBatch::new(nondegenerate(&mut rng, &[3 * M, D]), (0..3 * M).map(|i| i % C).collect())
            .expect("aligned");
        Self {
            a: nondegenerate(&mut rng, &[M, D]),
            w: nondegenerate(&mut rng, &[M, D]),
            right: nondegenerate(&mut rng, &[D, 2]),
            left: nondegenerate(&mut rng, &[2, M]),
            bias: nondegenerate(&mut rng, &[D]),
            labels,
            teacher_logits: nondegenerate(&mut rng, &[M, C]),
            teacher,
            centers: compute_class_centers(&pool, C).expect("all classes present"),
        }
    }
}

type CaseFn = fn(&mut Graph<f64>, Var, &Fixture) -> Result<Var>;

pub struct Case {
    pub name: &'static str,
    pub shape: &'static [usize],
    pub f: CaseFn,
}

/// `Σ w ⊙ v`, so that every output coordinate carries a distinct weight.
fn weighted(g: &mut Graph<f64>, v: Var, fx: &Fixture) -> Result<Var> {
    let w = g.constant(fx.w.clone());
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn both_sides(
    g: &mut Graph<f64>,
    x: Var,
    fx: &Fixture,
    op: fn(&mut Graph<f64>, Var, Var) -> Result<Var>,
) -> Result<Var> {
    let a = g.constant(fx.a.clone());
    let l = op(g, x, a)?;
    let r = op(g, a, x)?;
    let l = weighted(g, l, fx)?;
    let r = weighted(g, r, fx)?;
    g.add(l, r)
}

fn distill_weights() -> LossWeights {
    LossWeights {
        alpha: 0.7,
        beta: 0.5,
        gamma: 0.3,
        include_order1: true,
        ..LossWeights::default()
    }
}

pub fn cases() -> Vec<Case> {
    const MD: &[usize] = &[M, D];
    vec![
        Case { name: "add", shape: MD, f: |g, x, fx| both_sides(g, x, fx, Graph::add) },
        Case { name: "sub", shape: MD, f: |g, x, fx| both_sides(g, x, fx, Graph::sub) },
        Case { name: "mul", shape: MD, f: |g, x, fx| both_sides(g, x, fx, Graph::mul) },
        Case { name: "div", shape: MD, f: |g, x, fx| both_sides(g, x, fx, Graph::div) },
        Case {
            name: "div_scalar",
            shape: &[1],
            f: |g, x, fx| {
                let a = g.constant(fx.a.clone());
                let q = g.div(a, x)?;
                weighted(g, q, fx)
            },
        },
        Case { name: "scale", shape: MD, f: |g, x, fx| { let y = g.scale(x, -1.7); weighted(g, y, fx) } },
        Case { name: "relu", shape: MD, f: |g, x, fx| { let y = g.relu(x); weighted(g, y, fx) } },
        Case { name: "abs", shape: MD, f: |g, x, fx| { let y = g.abs(x); weighted(g, y, fx) } },
        Case { name: "square", shape: MD, f: |g, x, fx| { let y = g.square(x); weighted(g, y, fx) } },
        Case { name: "clamp_min", shape: MD, f: |g, x, fx| { let y = g.clamp_min(x, 0.0); weighted(g, y, fx) } },
        Case { name: "huber", shape: MD, f: |g, x, fx| { let y = g.huber(x, 0.5)?; weighted(g, y, fx) } },
        Case {
            name: "matmul",
            shape: MD,
            f: |g, x, fx| {
                let r = g.constant(fx.right.clone());
                let l = g.constant(fx.left.clone());
                let xr = g.matmul(x, r)?;
                let lx = g.matmul(l, x)?;
                let (xr, lx) = (g.square(xr), g.square(lx));
                let (xr, lx) = (g.sum(xr), g.sum(lx));
                g.add(xr, lx)
            },
        },
        Case {
            name: "add_bias",
            shape: MD,
            f: |g, x, fx| {
                let b = g.constant(fx.bias.clone());
                let y = g.add_bias(x, b)?;
                let y = g.square(y);
                weighted(g, y, fx)
            },
        },
        Case {
            name: "add_bias_rhs",
            shape: &[D],
            f: |g, x, fx| {
                let a = g.constant(fx.a.clone());
                let y = g.add_bias(a, x)?;
                let y = g.square(y);
                weighted(g, y, fx)
            },
        },
        Case { name: "sum", shape: MD, f: |g, x, _| { let y = g.square(x); Ok(g.sum(y)) } },
        Case { name: "mean", shape: MD, f: |g, x, _| { let y = g.square(x); Ok(g.mean(y)) } },
        Case { name: "l2norm", shape: MD, f: |g, x, _| Ok(g.l2norm(x)) },
        Case { name: "dot", shape: MD, f: |g, x, fx| { let a = g.constant(fx.a.clone()); let y = g.square(x); g.dot(y, a) } },
        Case {
            name: "softmax_cross_entropy",
            shape: &[M, C],
            f: |g, x, fx| g.softmax_cross_entropy(x, &fx.labels),
        },
        Case {
            name: "soft_target_kl",
            shape: &[M, C],
            f: |g, x, fx| g.soft_target_kl(x, &fx.teacher_logits, 2.0),
        },
        Case {
            name: "pairwise_distances",
            shape: MD,
            f: |g, x, _| {
                let d = g.pairwise_distances(x)?;
                let w = g.constant(Tensor::new(vec![M, M], (0..M * M).map(|i| 1.0 + 0.1 * i as f64).collect())?);
                let p = g.mul(d, w)?;
                Ok(g.sum(p))
            },
        },
        Case {
            name: "center_distances",
            shape: MD,
            f: |g, x, fx| {
                let d = g.center_distances(x, fx.centers.centers())?;
                let w = g.constant(Tensor::new(vec![M, C], (0..M * C).map(|i| 1.0 - 0.1 * i as f64).collect())?);
                let p = g.mul(d, w)?;
                Ok(g.sum(p))
            },
        },
        Case {
            name: "triplet_cosines",
            shape: MD,
            f: |g, x, _| {
                let t = vertex_triples(&select_triplets(M, usize::MAX, 0)?);
                let n = t.len();
                let c = g.triplet_cosines(x, &t)?;
                let w = g.constant(Tensor::vector((0..n).map(|i| 1.0 + 0.05 * i as f64).collect()));
                let p = g.mul(c, w)?;
                Ok(g.sum(p))
            },
        },
        Case { name: "loss_order1", shape: MD, f: |g, x, fx| order1_loss(g, &fx.teacher, x) },
        Case { name: "loss_order2", shape: MD, f: |g, x, fx| order2_loss(g, &fx.teacher, x) },
        Case { name: "loss_order3", shape: MD, f: |g, x, fx| order3_loss(g, &fx.teacher, x, 1.0, 4960, 0) },
        Case {
            name: "loss_order3_linear_huber",
            shape: MD,
            f: |g, x, fx| order3_loss(g, &fx.teacher, x, 0.05, 4960, 0),
        },
        Case { name: "loss_center", shape: MD, f: |g, x, fx| center_loss(g, &fx.teacher, x, &fx.centers) },
        Case {
            name: "loss_total",
            shape: MD,
            f: |g, x, fx| Ok(total_distill_loss(g, &fx.teacher, x, &fx.centers, &distill_weights(), 0)?.value),
        },
        Case {
            name: "loss_ce",
            shape: &[M, C],
            f: |g, x, fx| g.softmax_cross_entropy(x, &fx.labels),
        },
        Case {
            name: "loss_kd",
            shape: &[M, C],
            f: |g, x, fx| {
                let kl = g.soft_target_kl(x, &fx.teacher_logits, 4.0)?;
                Ok(g.scale(kl, 16.0))
            },
        },
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteRow {
    pub op: &'static str,
    pub max_relative_error: f64,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.max_relative_error < THRESHOLD
    }
}

/// Worst relative error of each case over [`TRIALS`] seeded inputs. When
/// `corrupt` names a case, its analytic gradient is perturbed by 1% so the
/// suite has something to catch.
pub fn run_suite(corrupt: Option<&str>) -> Result<Vec<SuiteRow>> {
    let mut rows = Vec::new();
    for case in cases() {
        let mut worst = 0.0f64;
        for trial in 0..TRIALS {
            let fx = Fixture::new(trial);
            let mut rng = ChaCha8Rng::seed_from_u64(1_000 + trial);
            let x = nondegenerate(&mut rng, case.shape);
            let f = |g: &mut Graph<f64>, v: Var| (case.f)(g, v, &fx);
            let mut analytic = analytic_gradient(&f, &x)?;
            if corrupt == Some(case.name) {
                for a in &mut analytic {
                    *a *= 1.01;
                }
            }
            let report = compare_with_central_differences(&f, analytic, &x, EPS)?;
            worst = worst.max(report.max_relative_error);
        }
        rows.push(SuiteRow {
            op: case.name,
            max_relative_error: worst,
        });
    }
    Ok(rows)
}

pub fn write_csv<W: std::io::Write>(rows: &[SuiteRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["op", "max_relative_error", "passed"])?;
    for r in rows {
        out.write_record([r.op.to_string(), format!("{:e}", r.max_relative_error), r.passed().to_string()])?;
    }
    out.flush()?;
    Ok(())
}
